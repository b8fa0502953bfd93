//! Request traces: one `request_id,arrival_ms,input_len,output_len` record per
//! line. Blank lines and lines starting with `#` are ignored.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, LogNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const TRACE_HEADER: &str = "# request_id,arrival_ms,input_len,output_len";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RequestTrace {
    pub request_id: u64,
    pub arrival_ms: f64,
    pub input_len: u32,
    pub output_len: u32,
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("cannot read trace {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("trace line {line}: {message}")]
    Parse { line: usize, message: String },
}

fn parse_line(line: &str, lineno: usize) -> Result<RequestTrace, TraceError> {
    let err = |message: String| TraceError::Parse { line: lineno, message };
    let fields: Vec<&str> = line.split(',').map(str::trim).collect();
    if fields.len() != 4 {
        return Err(err(format!("expected 4 comma-separated fields, found {}", fields.len())));
    }
    let request_id = fields[0]
        .parse::<u64>()
        .map_err(|e| err(format!("request_id `{}`: {e}", fields[0])))?;
    let arrival_ms = fields[1]
        .parse::<f64>()
        .map_err(|e| err(format!("arrival_ms `{}`: {e}", fields[1])))?;
    if !(arrival_ms.is_finite() && arrival_ms >= 0.0) {
        return Err(err(format!("arrival_ms must be finite and nonnegative, got {arrival_ms}")));
    }
    let len = |i: usize, name: &str| -> Result<u32, TraceError> {
        let v = fields[i]
            .parse::<u32>()
            .map_err(|e| err(format!("{name} `{}`: {e}", fields[i])))?;
        if v == 0 {
            return Err(err(format!("{name} must be at least 1")));
        }
        Ok(v)
    };
    Ok(RequestTrace {
        request_id,
        arrival_ms,
        input_len: len(2, "input_len")?,
        output_len: len(3, "output_len")?,
    })
}

/// Parses trace text and sorts by `(arrival_ms, request_id)`. `#` lines
/// and an uncommented header line are skipped.
pub fn parse_trace(text: &str) -> Result<Vec<RequestTrace>, TraceError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') || (out.is_empty() && line == &TRACE_HEADER[2..]) {
            continue;
        }
        out.push(parse_line(line, i + 1)?);
    }
    sort_trace(&mut out);
    Ok(out)
}

pub fn sort_trace(records: &mut [RequestTrace]) {
    records.sort_by(|a, b| a.arrival_ms.total_cmp(&b.arrival_ms).then(a.request_id.cmp(&b.request_id)));
}

pub fn load_trace(path: &Path) -> Result<Vec<RequestTrace>, TraceError> {
    let text = std::fs::read_to_string(path).map_err(|source| TraceError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_trace(&text)
}

pub fn write_trace<W: Write>(records: &[RequestTrace], mut w: W) -> std::io::Result<()> {
    writeln!(w, "{TRACE_HEADER}")?;
    for r in records {
        writeln!(w, "{},{},{},{}", r.request_id, r.arrival_ms, r.input_len, r.output_len)?;
    }
    Ok(())
}

pub fn trace_to_string(records: &[RequestTrace]) -> String {
    let mut buf = Vec::new();
    write_trace(records, &mut buf).expect("writing to a Vec cannot fail");
    String::from_utf8(buf).expect("trace text is ASCII")
}

/// Mean input and output lengths.
pub fn mean_lengths(records: &[RequestTrace]) -> (f64, f64) {
    if records.is_empty() {
        return (0.0, 0.0);
    }
    let n = records.len() as f64;
    let i: f64 = records.iter().map(|r| f64::from(r.input_len)).sum();
    let o: f64 = records.iter().map(|r| f64::from(r.output_len)).sum();
    (i / n, o / n)
}

/// Short dialog turns: log-normal lengths rescaled so the trace means are
/// 183 (input) and 299 (output), Poisson arrivals at `rate_per_s`.
pub fn sharegpt_like(n: usize, rate_per_s: f64, seed: u64) -> Vec<RequestTrace> {
    const MEAN_IN: f64 = 183.0;
    const MEAN_OUT: f64 = 299.0;
    const SIGMA_IN: f64 = 0.8;
    const SIGMA_OUT: f64 = 0.6;
    let lognormal = |mean: f64, sigma: f64| LogNormal::new(mean.ln() - sigma * sigma / 2.0, sigma).expect("valid sigma");
    let din = lognormal(MEAN_IN, SIGMA_IN);
    let dout = lognormal(MEAN_OUT, SIGMA_OUT);
    let gaps = Exp::new(rate_per_s.max(f64::MIN_POSITIVE)).expect("positive rate");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t_ms = 0.0;
    let mut raw = Vec::with_capacity(n);
    for _ in 0..n {
        raw.push((t_ms, din.sample(&mut rng), dout.sample(&mut rng)));
        t_ms += 1000.0 * gaps.sample(&mut rng);
    }
    let scale = |target: f64, pick: fn(&(f64, f64, f64)) -> f64| {
        let mean = raw.iter().map(pick).sum::<f64>() / n.max(1) as f64;
        if mean > 0.0 {
            target / mean
        } else {
            1.0
        }
    };
    let (k_in, k_out) = (scale(MEAN_IN, |r| r.1), scale(MEAN_OUT, |r| r.2));
    raw.iter()
        .enumerate()
        .map(|(i, &(t, li, lo))| RequestTrace {
            request_id: i as u64,
            arrival_ms: (t * 1000.0_f64).round() / 1000.0,
            input_len: (li * k_in).round().max(1.0) as u32,
            output_len: (lo * k_out).round().max(1.0) as u32,
        })
        .collect()
}

/// Long-document summarization: inputs uniform in 1500..=8000 tokens,
/// outputs in 64..=192, all arriving at time zero.
pub fn arxiv_like(n: usize, seed: u64) -> Vec<RequestTrace> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n as u64)
        .map(|request_id| RequestTrace {
            request_id,
            arrival_ms: 0.0,
            input_len: rng.gen_range(1500..=8000),
            output_len: rng.gen_range(64..=192),
        })
        .collect()
}

/// Synthetic trace families shipped with the simulator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceKind {
    SharegptLike,
    ArxivLike,
}

/// Requests, seed and arrival rate the bundled trace files were generated with.
pub const BUNDLED_REQUESTS: usize = 256;
pub const BUNDLED_SEED: u64 = 2024;
pub const BUNDLED_RATE_PER_S: f64 = 4.0;

impl TraceKind {
    pub const ALL: [TraceKind; 2] = [TraceKind::SharegptLike, TraceKind::ArxivLike];

    pub fn name(self) -> &'static str {
        match self {
            TraceKind::SharegptLike => "sharegpt_like",
            TraceKind::ArxivLike => "arxiv_like",
        }
    }

    /// `rate_per_s` is ignored by the arxiv-like family, whose requests all
    /// arrive at time zero.
    pub fn generate(self, n: usize, rate_per_s: f64, seed: u64) -> Vec<RequestTrace> {
        match self {
            TraceKind::SharegptLike => sharegpt_like(n, rate_per_s, seed),
            TraceKind::ArxivLike => arxiv_like(n, seed),
        }
    }

    /// Records of the bundled trace file.
    pub fn bundled(self) -> Vec<RequestTrace> {
        parse_trace(self.bundled_text()).expect("bundled trace parses")
    }

    pub fn bundled_text(self) -> &'static str {
        match self {
            TraceKind::SharegptLike => SHAREGPT_LIKE,
            TraceKind::ArxivLike => ARXIV_LIKE,
        }
    }
}

impl std::str::FromStr for TraceKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "sharegpt_like" | "sharegpt" => Ok(TraceKind::SharegptLike),
            "arxiv_like" | "arxiv" => Ok(TraceKind::ArxivLike),
            _ => Err(format!("unknown trace kind `{s}` (expected sharegpt_like or arxiv_like)")),
        }
    }
}

const SHAREGPT_LIKE: &str = include_str!("../../traces/sharegpt_like.csv");
const ARXIV_LIKE: &str = include_str!("../../traces/arxiv_like.csv");

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_input_is_empty_trace() {
        assert!(parse_trace("").unwrap().is_empty());
        assert!(parse_trace("# only a comment\n\n").unwrap().is_empty());
    }

    #[test]
    fn sorts_by_arrival_then_id() {
        let t = parse_trace("3,5.0,10,2\n1,0.5,7,1\n2,5.0,9,3\n").unwrap();
        let ids: Vec<u64> = t.iter().map(|r| r.request_id).collect();
        assert_eq!(ids, vec![1, 2, 3]);
    }

    #[test]
    fn bare_header_is_skipped_only_first() {
        let t = parse_trace("request_id,arrival_ms,input_len,output_len\n1,0,5,5\n").unwrap();
        assert_eq!(t.len(), 1);
        assert!(parse_trace("1,0,5,5\nrequest_id,arrival_ms,input_len,output_len\n").is_err());
    }

    #[test]
    fn reports_line_numbers() {
        let e = parse_trace("# header\n1,0,5,5\n2,zero,5,5\n").unwrap_err();
        assert!(matches!(e, TraceError::Parse { line: 3, .. }), "{e}");
        let e = parse_trace("1,0,5\n").unwrap_err();
        assert!(matches!(e, TraceError::Parse { line: 1, .. }));
        let e = parse_trace("1,0,0,5\n").unwrap_err();
        assert!(e.to_string().contains("input_len"));
        let e = parse_trace("1,-1,4,5\n").unwrap_err();
        assert!(e.to_string().contains("arrival_ms"));
    }

    #[test]
    fn round_trip() {
        let recs = sharegpt_like(50, 3.0, 9);
        let back = parse_trace(&trace_to_string(&recs)).unwrap();
        assert_eq!(back, recs);
    }

    #[test]
    fn generators_are_deterministic_and_in_range() {
        assert_eq!(arxiv_like(20, 1), arxiv_like(20, 1));
        for r in arxiv_like(200, 2) {
            assert!((1500..=8000).contains(&r.input_len));
            assert!((64..=192).contains(&r.output_len));
        }
        let s = sharegpt_like(5000, 1.0, 3);
        let (i, o) = mean_lengths(&s);
        assert!((i / 183.0 - 1.0).abs() < 0.05, "{i}");
        assert!((o / 299.0 - 1.0).abs() < 0.05, "{o}");
        assert!(s.windows(2).all(|w| w[0].arrival_ms <= w[1].arrival_ms));
    }

    #[test]
    fn missing_file_names_path() {
        let e = load_trace(Path::new("/definitely/not/here.trace")).unwrap_err();
        assert!(e.to_string().contains("/definitely/not/here.trace"));
    }

    #[test]
    fn bundled_files_match_generators() {
        for k in TraceKind::ALL {
            let want = k.generate(BUNDLED_REQUESTS, BUNDLED_RATE_PER_S, BUNDLED_SEED);
            assert_eq!(k.bundled_text(), trace_to_string(&want), "{}", k.name());
            assert_eq!(k.bundled(), want);
        }
        let (i, o) = mean_lengths(&TraceKind::SharegptLike.bundled());
        assert!((i / 183.0 - 1.0).abs() <= 0.05, "{i}");
        assert!((o / 299.0 - 1.0).abs() <= 0.05, "{o}");
        assert_eq!("arxiv".parse::<TraceKind>().unwrap(), TraceKind::ArxivLike);
    }
}
