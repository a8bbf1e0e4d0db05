//! Measured elapsed times and speedups used as the calibration target.

use serde::{Deserialize, Serialize};

use super::CostError;

/// Parses `H:MM:SS` (hours may exceed 24) into whole seconds.
pub fn parse_hms(text: &str) -> Result<u64, CostError> {
    let bad = || CostError::Input(format!("`{text}` is not H:MM:SS"));
    let parts: Vec<&str> = text.trim().split(':').collect();
    let [h, m, s] = parts.as_slice() else {
        return Err(bad());
    };
    let h: u64 = h.parse().map_err(|_| bad())?;
    let m: u64 = m.parse().map_err(|_| bad())?;
    let s: u64 = s.parse().map_err(|_| bad())?;
    if m >= 60 || s >= 60 {
        return Err(bad());
    }
    Ok(h * 3600 + m * 60 + s)
}

pub fn format_hms(seconds: u64) -> String {
    format!("{}:{:02}:{:02}", seconds / 3600, seconds / 60 % 60, seconds % 60)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    DataParallel,
    ExperimentParallel,
}

impl Method {
    pub const ALL: [Method; 2] = [Method::DataParallel, Method::ExperimentParallel];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::DataParallel => "data_parallel",
            Method::ExperimentParallel => "experiment_parallel",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "data_parallel" => Some(Method::DataParallel),
            "experiment_parallel" => Some(Method::ExperimentParallel),
            _ => None,
        }
    }
}

/// One measured entry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub elapsed_s: u64,
    pub speedup: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRow {
    pub n: usize,
    pub data_parallel: Measurement,
    pub experiment_parallel: Measurement,
}

impl ReferenceRow {
    pub fn get(&self, method: Method) -> Measurement {
        match method {
            Method::DataParallel => self.data_parallel,
            Method::ExperimentParallel => self.experiment_parallel,
        }
    }
}

/// Reference table, one row per GPU count, rows ordered by `n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceTable {
    rows: Vec<ReferenceRow>,
}

#[allow(clippy::approx_constant)]
const BUNDLED: [(usize, &str, f64, &str, f64); 7] = [
    (1, "44:18:02", 1.00, "44:20:19", 1.00),
    (2, "23:09:28", 1.91, "22:24:39", 1.98),
    (4, "15:09:35", 2.92, "11:32:20", 3.84),
    (8, "7:41:12", 5.76, "7:03:17", 6.28),
    (12, "5:59:59", 7.38, "5:35:22", 7.93),
    (16, "4:26:50", 9.96, "4:11:54", 10.56),
    (32, "3:21:44", 13.18, "2:55:06", 15.19),
];

impl ReferenceTable {
    /// Validates ordering and the presence of the `n = 1` baseline.
    pub fn new(mut rows: Vec<ReferenceRow>) -> Result<Self, CostError> {
        rows.sort_by_key(|r| r.n);
        if rows.len() < 2 {
            return Err(CostError::Input("reference needs at least two GPU counts".into()));
        }
        if rows[0].n != 1 {
            return Err(CostError::Input("reference lacks the single-GPU baseline".into()));
        }
        if rows.windows(2).any(|w| w[0].n == w[1].n) {
            return Err(CostError::Input("reference repeats a GPU count".into()));
        }
        for r in &rows {
            for m in Method::ALL {
                let e = r.get(m);
                if e.elapsed_s == 0 || !(e.speedup > 0.0 && e.speedup.is_finite()) {
                    return Err(CostError::Input(format!(
                        "non-positive entry for n={} {}",
                        r.n,
                        m.as_str()
                    )));
                }
            }
        }
        Ok(Self { rows })
    }

    /// The 1..32 GPU benchmark: elapsed time of the full hyper-parameter
    /// batch and speedup over one GPU, averaged over three runs.
    pub fn bundled() -> Self {
        let rows = BUNDLED
            .iter()
            .map(|&(n, dp_t, dp_s, ep_t, ep_s)| ReferenceRow {
                n,
                data_parallel: Measurement {
                    elapsed_s: parse_hms(dp_t).expect("bundled time"),
                    speedup: dp_s,
                },
                experiment_parallel: Measurement {
                    elapsed_s: parse_hms(ep_t).expect("bundled time"),
                    speedup: ep_s,
                },
            })
            .collect();
        Self::new(rows).expect("bundled table is valid")
    }

    pub fn rows(&self) -> &[ReferenceRow] {
        &self.rows
    }

    pub fn gpu_counts(&self) -> Vec<usize> {
        self.rows.iter().map(|r| r.n).collect()
    }

    pub fn baseline(&self) -> &ReferenceRow {
        &self.rows[0]
    }

    /// CSV with header `method,n,elapsed_s,speedup`, data-parallel rows first.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,n,elapsed_s,speedup\n");
        for m in Method::ALL {
            for r in &self.rows {
                let e = r.get(m);
                out.push_str(&format!("{},{},{},{}\n", m.as_str(), r.n, e.elapsed_s, e.speedup));
            }
        }
        out
    }

    /// Reads the CSV form. `elapsed_s` may be whole seconds or `H:MM:SS`.
    pub fn from_csv(text: &str) -> Result<Self, CostError> {
        let mut dp = std::collections::BTreeMap::new();
        let mut ep = std::collections::BTreeMap::new();
        let mut lines = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'));
        match lines.next() {
            Some("method,n,elapsed_s,speedup") => {}
            other => return Err(CostError::Input(format!("unexpected reference header {other:?}"))),
        }
        for line in lines {
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            let [method, n, elapsed, speedup] = f.as_slice() else {
                return Err(CostError::Input(format!("malformed reference row `{line}`")));
            };
            let method = Method::parse(method).ok_or_else(|| CostError::Input(format!("unknown method `{method}`")))?;
            let n: usize = n.parse().map_err(|_| CostError::Input(format!("bad n `{n}`")))?;
            let elapsed_s = if elapsed.contains(':') {
                parse_hms(elapsed)?
            } else {
                elapsed
                    .parse()
                    .map_err(|_| CostError::Input(format!("bad elapsed `{elapsed}`")))?
            };
            let speedup: f64 = speedup
                .parse()
                .map_err(|_| CostError::Input(format!("bad speedup `{speedup}`")))?;
            let target = match method {
                Method::DataParallel => &mut dp,
                Method::ExperimentParallel => &mut ep,
            };
            if target.insert(n, Measurement { elapsed_s, speedup }).is_some() {
                return Err(CostError::Input(format!("duplicate row for {} n={n}", method.as_str())));
            }
        }
        if dp.keys().ne(ep.keys()) {
            return Err(CostError::Input("both methods must cover the same GPU counts".into()));
        }
        let rows = dp
            .into_iter()
            .zip(ep.into_values())
            .map(|((n, d), e)| ReferenceRow {
                n,
                data_parallel: d,
                experiment_parallel: e,
            })
            .collect();
        Self::new(rows)
    }
}
