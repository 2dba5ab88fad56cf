//! Reader and writer for single-segment WFDB records in storage formats 16
//! and 212.
//!
//! Header: one record line `name nsig fs nsamp` followed by one line per
//! signal `file format gain(baseline)/units adcres adczero init checksum
//! blocksize description`. `#` lines are comments. The lead is selected by
//! its description (case-insensitive) or by `#<index>`.

use super::{DataError, EcgRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SignalFormat {
    /// 16-bit little-endian two's complement.
    Format16,
    /// Pairs of 12-bit two's complement samples packed into 3 bytes.
    Format212,
}

impl SignalFormat {
    pub fn code(self) -> u16 {
        match self {
            SignalFormat::Format16 => 16,
            SignalFormat::Format212 => 212,
        }
    }

    pub fn from_code(code: u16) -> Result<Self, DataError> {
        match code {
            16 => Ok(SignalFormat::Format16),
            212 => Ok(SignalFormat::Format212),
            other => Err(DataError::UnsupportedFormat(other.to_string())),
        }
    }

    pub fn adc_range(self) -> (i64, i64) {
        match self {
            SignalFormat::Format16 => (i16::MIN as i64, i16::MAX as i64),
            SignalFormat::Format212 => (-2048, 2047),
        }
    }

    fn resolution_bits(self) -> u32 {
        match self {
            SignalFormat::Format16 => 16,
            SignalFormat::Format212 => 12,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct SignalSpec {
    file: String,
    format: SignalFormat,
    byte_offset: usize,
    gain: f64,
    baseline: i64,
    description: String,
}

#[derive(Debug, Clone, PartialEq)]
struct Header {
    name: String,
    fs: u32,
    nsamp: Option<usize>,
    signals: Vec<SignalSpec>,
}

const DEFAULT_GAIN: f64 = 200.0;

fn malformed(msg: impl Into<String>) -> DataError {
    DataError::MalformedHeader(msg.into())
}

fn parse_header(text: &str) -> Result<Header, DataError> {
    let mut lines = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'));
    let record = lines.next().ok_or_else(|| malformed("missing record line"))?;
    let mut fields = record.split_whitespace();
    let name = fields.next().ok_or_else(|| malformed("missing record name"))?;
    if name.contains('/') {
        return Err(malformed("multi-segment records are not supported"));
    }
    let nsig: usize = fields
        .next()
        .ok_or_else(|| malformed("missing signal count"))?
        .parse()
        .map_err(|_| malformed("bad signal count"))?;
    if nsig == 0 {
        return Err(malformed("header describes no signals"));
    }
    let fs = match fields.next() {
        // fs[/counterfreq][(base)]
        Some(f) => {
            let f = f.split(['/', '(']).next().unwrap_or(f);
            let v: f64 = f.parse().map_err(|_| malformed(format!("bad sampling frequency {f:?}")))?;
            if !(v > 0.0) || v.fract() != 0.0 || v > u32::MAX as f64 {
                return Err(malformed(format!("sampling frequency {v} is not a positive integer")));
            }
            v as u32
        }
        None => 250,
    };
    let nsamp = match fields.next() {
        Some(n) => Some(n.parse().map_err(|_| malformed(format!("bad sample count {n:?}")))?),
        None => None,
    };

    let mut signals = Vec::with_capacity(nsig);
    for i in 0..nsig {
        let line = lines.next().ok_or_else(|| malformed(format!("missing signal line {i}")))?;
        signals.push(parse_signal_line(line, i)?);
    }
    Ok(Header { name: name.to_string(), fs, nsamp, signals })
}

fn parse_signal_line(line: &str, index: usize) -> Result<SignalSpec, DataError> {
    let mut rest = line;
    let mut next = || -> Option<&str> {
        let t = rest.trim_start();
        if t.is_empty() {
            return None;
        }
        let end = t.find(char::is_whitespace).unwrap_or(t.len());
        let (tok, r) = t.split_at(end);
        rest = r;
        Some(tok)
    };
    let file = next().ok_or_else(|| malformed(format!("signal {index}: missing file name")))?.to_string();
    let fmt = next().ok_or_else(|| malformed(format!("signal {index}: missing format")))?;

    // format[xspf][:skew][+offset]
    let (fmt_main, byte_offset) = match fmt.split_once('+') {
        Some((a, off)) => (a, off.parse().map_err(|_| malformed(format!("bad byte offset {off:?}")))?),
        None => (fmt, 0usize),
    };
    let fmt_main = fmt_main.split(':').next().unwrap_or(fmt_main);
    let (code, spf) = match fmt_main.split_once('x') {
        Some((c, s)) => (c, s),
        None => (fmt_main, "1"),
    };
    if spf != "1" {
        return Err(DataError::UnsupportedFormat(format!("{fmt} (multiple samples per frame)")));
    }
    let code: u16 = code.parse().map_err(|_| DataError::UnsupportedFormat(fmt.to_string()))?;
    let format = SignalFormat::from_code(code)?;

    let (gain, baseline_explicit) = match next() {
        Some(g) => {
            // gain[(baseline)][/units]
            let g = g.split('/').next().unwrap_or(g);
            let (gs, bl) = match g.split_once('(') {
                Some((gs, b)) => {
                    let b = b.trim_end_matches(')');
                    let bl: i64 = b.parse().map_err(|_| malformed(format!("bad baseline {b:?}")))?;
                    (gs, Some(bl))
                }
                None => (g, None),
            };
            let gain: f64 = gs.parse().map_err(|_| malformed(format!("bad gain {gs:?}")))?;
            (gain, bl)
        }
        None => (DEFAULT_GAIN, None),
    };
    let _adc_res = next();
    let adc_zero: i64 = match next() {
        Some(z) => z.parse().map_err(|_| malformed(format!("bad adc zero {z:?}")))?,
        None => 0,
    };
    let _init = next();
    let _checksum = next();
    let _block = next();
    let description = rest.trim().to_string();
    if gain == 0.0 || !gain.is_finite() {
        return Err(DataError::ZeroGain(description));
    }
    Ok(SignalSpec {
        file,
        format,
        byte_offset,
        gain,
        baseline: baseline_explicit.unwrap_or(adc_zero),
        description,
    })
}

fn sign_extend_12(v: u16) -> i64 {
    let v = (v & 0x0FFF) as i64;
    if v & 0x800 != 0 { v - 0x1000 } else { v }
}

/// Decodes `count` interleaved samples from a byte stream.
fn decode_stream(format: SignalFormat, bytes: &[u8], count: usize) -> Result<Vec<i64>, DataError> {
    let needed = match format {
        SignalFormat::Format16 => count * 2,
        SignalFormat::Format212 => (count * 3).div_ceil(2),
    };
    if bytes.len() < needed {
        return Err(DataError::Truncated { needed, available: bytes.len() });
    }
    let mut out = Vec::with_capacity(count);
    match format {
        SignalFormat::Format16 => {
            out.extend(bytes[..needed].chunks_exact(2).map(|c| i16::from_le_bytes([c[0], c[1]]) as i64));
        }
        SignalFormat::Format212 => {
            for s in 0..count {
                let base = (s / 2) * 3;
                let v = if s % 2 == 0 {
                    bytes[base] as u16 | ((bytes[base + 1] as u16 & 0x0F) << 8)
                } else {
                    bytes[base + 2] as u16 | ((bytes[base + 1] as u16 & 0xF0) << 4)
                };
                out.push(sign_extend_12(v));
            }
        }
    }
    Ok(out)
}

fn encode_stream(format: SignalFormat, adc: &[i64]) -> Vec<u8> {
    match format {
        SignalFormat::Format16 => adc.iter().flat_map(|&v| (v as i16).to_le_bytes()).collect(),
        SignalFormat::Format212 => {
            let mut out = Vec::with_capacity((adc.len() * 3).div_ceil(2));
            for pair in adc.chunks(2) {
                let a = (pair[0] as u16) & 0x0FFF;
                out.push((a & 0xFF) as u8);
                match pair.get(1) {
                    Some(&b) => {
                        let b = (b as u16) & 0x0FFF;
                        out.push(((a >> 8) as u8) | (((b >> 8) as u8) << 4));
                        out.push((b & 0xFF) as u8);
                    }
                    None => out.push((a >> 8) as u8),
                }
            }
            out
        }
    }
}

fn select_lead(header_bytes: &[u8], lead_selector: &str) -> Result<(Header, usize), DataError> {
    let text = std::str::from_utf8(header_bytes).map_err(|_| malformed("header is not UTF-8"))?;
    let header = parse_header(text)?;
    let wanted = lead_selector.trim();
    let index = match wanted.strip_prefix('#') {
        Some(i) => i.parse::<usize>().ok().filter(|&i| i < header.signals.len()),
        None => header.signals.iter().position(|s| s.description.eq_ignore_ascii_case(wanted)),
    }
    .ok_or_else(|| DataError::LeadNotFound(wanted.to_string()))?;
    Ok((header, index))
}

/// Reads a record from disk; the signal file is resolved relative to the
/// header's directory.
pub fn read_wfdb_record(header_path: &std::path::Path, lead_selector: &str) -> Result<EcgRecord, DataError> {
    let io = |p: &std::path::Path, e: std::io::Error| DataError::Io(format!("{}: {e}", p.display()));
    let header_bytes = std::fs::read(header_path).map_err(|e| io(header_path, e))?;
    let (header, index) = select_lead(&header_bytes, lead_selector)?;
    let dir = header_path.parent().unwrap_or_else(|| std::path::Path::new("."));
    let signal_path = dir.join(&header.signals[index].file);
    let signal_bytes = std::fs::read(&signal_path).map_err(|e| io(&signal_path, e))?;
    parse_wfdb_record(&header_bytes, &signal_bytes, lead_selector)
}

/// Parses a header and the bytes of the signal file holding `lead_selector`.
///
/// Signals stored in the same file as the selected lead are assumed to be
/// interleaved frame by frame in header order.
pub fn parse_wfdb_record(
    header_bytes: &[u8],
    signal_bytes: &[u8],
    lead_selector: &str,
) -> Result<EcgRecord, DataError> {
    let (header, index) = select_lead(header_bytes, lead_selector)?;
    let spec = &header.signals[index];

    let in_file: Vec<usize> = (0..header.signals.len())
        .filter(|&i| header.signals[i].file == spec.file)
        .collect();
    if in_file.iter().any(|&i| header.signals[i].format != spec.format) {
        return Err(DataError::UnsupportedFormat("mixed formats within one signal file".into()));
    }
    let frame = in_file.len();
    let position = in_file.iter().position(|&i| i == index).expect("selected signal is in its file");
    let payload = signal_bytes.get(spec.byte_offset..).ok_or(DataError::Truncated {
        needed: spec.byte_offset,
        available: signal_bytes.len(),
    })?;
    let nsamp = match header.nsamp {
        Some(n) if n > 0 => n,
        _ => {
            let per_frame_bits = frame * spec.format.resolution_bits() as usize;
            payload.len() * 8 / per_frame_bits
        }
    };
    if nsamp == 0 {
        return Err(DataError::Truncated { needed: 1, available: 0 });
    }
    let stream = decode_stream(spec.format, payload, nsamp * frame)?;
    let samples = stream
        .iter()
        .skip(position)
        .step_by(frame)
        .map(|&adc| (adc - spec.baseline) as f64 / spec.gain)
        .collect();
    Ok(EcgRecord {
        record_id: header.name.clone(),
        patient_id: header.name,
        samples,
        sampling_rate: header.fs,
        lead_name: spec.description.clone(),
    })
}

/// Quantizes `mv * gain` with round-half-even, then adds `baseline`.
pub fn quantize(mv: f64, gain: f64, baseline: i64) -> i64 {
    (mv * gain).round_ties_even() as i64 + baseline
}

/// Writes a one-signal record. Returns `(header, signal file)` bytes; the
/// header references the signal file as `<record_id>.dat`.
pub fn write_wfdb_record(
    record: &EcgRecord,
    gain: f64,
    baseline: i64,
    format: SignalFormat,
) -> Result<(Vec<u8>, Vec<u8>), DataError> {
    if !(gain > 0.0) || !gain.is_finite() {
        return Err(DataError::ZeroGain(record.lead_name.clone()));
    }
    let (lo, hi) = format.adc_range();
    let adc = record
        .samples
        .iter()
        .map(|&v| {
            let q = quantize(v, gain, baseline);
            if !v.is_finite() || q < lo || q > hi {
                Err(DataError::Overflow { value: v, adc: q, format: format.code() })
            } else {
                Ok(q)
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    let init = adc.first().copied().unwrap_or(0);
    let checksum = adc.iter().fold(0i64, |s, &v| s.wrapping_add(v)) as i16;
    let header = format!(
        "{id} 1 {fs} {n}\n{id}.dat {fmt} {gain}({baseline})/mV {res} 0 {init} {checksum} 0 {lead}\n",
        id = record.record_id,
        fs = record.sampling_rate,
        n = adc.len(),
        fmt = format.code(),
        res = format.resolution_bits(),
        lead = record.lead_name,
    );
    Ok((header.into_bytes(), encode_stream(format, &adc)))
}
