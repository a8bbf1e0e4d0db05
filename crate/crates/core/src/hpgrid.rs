//! Hyper-parameter spaces and their expansion into experiment specifications.
//!
//! A [`HyperSpace`] is an ordered list of axes. [`cross_product`] enumerates
//! every combination in row-major order (the last axis varies fastest), so
//! a given space always yields the same experiment ids.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use thiserror::Error;

/// Default samples per replica per step.
pub const DEFAULT_PER_REPLICA_BATCH: u64 = 2;
/// Default single-device learning rate.
pub const DEFAULT_BASE_LR: f64 = 1e-4;
/// Default training epochs per experiment.
pub const DEFAULT_EPOCHS: u64 = 250;

/// Axis names that override the per-experiment training constants.
pub const BATCH_AXIS: &str = "batch";
pub const LR_AXIS: &str = "lr";
pub const EPOCHS_AXIS: &str = "epochs";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("axis `{0}` has no values")]
    EmptyAxis(String),
    #[error("axis `{0}` is declared more than once")]
    DuplicateAxis(String),
    #[error("axis `{axis}` repeats value `{value}`")]
    DuplicateValue { axis: String, value: String },
    #[error("hyper-space has no axes")]
    NoAxes,
    #[error("invalid count {0}: must be at least 1")]
    InvalidCount(i64),
    #[error("invalid learning rate {0}: must be positive and finite")]
    InvalidRate(f64),
    #[error("axis `{axis}` value `{value}` cannot be used as {what}")]
    BadOverride {
        axis: String,
        value: String,
        what: &'static str,
    },
}

/// A single grid value. Values keep the textual form they were declared
/// with; equality is by kind and text, never by float comparison.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Scalar {
    Real(String),
    Integer(i64),
    Token(String),
}

impl Scalar {
    /// Builds a real from a float using the shortest text that round-trips.
    pub fn real(value: f64) -> Self {
        Scalar::Real(format_real(value))
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Scalar::Real(s) => s.parse().ok(),
            Scalar::Integer(i) => Some(*i as f64),
            Scalar::Token(_) => None,
        }
    }

    pub fn as_i64(&self) -> Option<i64> {
        match self {
            Scalar::Integer(i) => Some(*i),
            _ => None,
        }
    }
}

impl fmt::Display for Scalar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scalar::Real(s) | Scalar::Token(s) => f.write_str(s),
            Scalar::Integer(i) => write!(f, "{i}"),
        }
    }
}

/// Shortest round-trip decimal form, always carrying a decimal point or
/// exponent so it reads back as a real.
pub fn format_real(value: f64) -> String {
    let s = format!("{value:?}");
    if s.contains('.') || s.contains('e') || s.contains("inf") || s.contains("NaN") {
        s
    } else {
        format!("{s}.0")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HyperAxis {
    name: String,
    values: Vec<Scalar>,
}

impl HyperAxis {
    pub fn new(name: impl Into<String>, values: Vec<Scalar>) -> Result<Self, GridError> {
        let name = name.into();
        if values.is_empty() {
            return Err(GridError::EmptyAxis(name));
        }
        let mut seen = HashSet::new();
        for v in &values {
            if !seen.insert(v) {
                return Err(GridError::DuplicateValue {
                    axis: name,
                    value: v.to_string(),
                });
            }
        }
        Ok(Self { name, values })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn values(&self) -> &[Scalar] {
        &self.values
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HyperSpace {
    axes: Vec<HyperAxis>,
}

impl HyperSpace {
    pub fn new(axes: Vec<HyperAxis>) -> Result<Self, GridError> {
        if axes.is_empty() {
            return Err(GridError::NoAxes);
        }
        let mut names = HashSet::new();
        for axis in &axes {
            if axis.values.is_empty() {
                return Err(GridError::EmptyAxis(axis.name.clone()));
            }
            if !names.insert(axis.name.as_str()) {
                return Err(GridError::DuplicateAxis(axis.name.clone()));
            }
        }
        Ok(Self { axes })
    }

    pub fn axes(&self) -> &[HyperAxis] {
        &self.axes
    }

    /// Number of grid points (product of axis cardinalities).
    pub fn size(&self) -> usize {
        self.axes.iter().map(|a| a.values.len()).product()
    }
}

/// One point of the grid with its training constants resolved.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub id: usize,
    pub assignment: BTreeMap<String, Scalar>,
    pub per_replica_batch: u64,
    pub base_lr: f64,
    pub epochs: u64,
}

impl ExperimentSpec {
    /// A spec with default constants and an empty assignment, used where
    /// only the id matters (synthetic grids of a given size).
    pub fn placeholder(id: usize) -> Self {
        Self {
            id,
            assignment: BTreeMap::new(),
            per_replica_batch: DEFAULT_PER_REPLICA_BATCH,
            base_lr: DEFAULT_BASE_LR,
            epochs: DEFAULT_EPOCHS,
        }
    }

    pub fn global_batch(&self, n_gpus: u64) -> Result<u64, GridError> {
        scale_global_batch(self.per_replica_batch as i64, n_gpus as i64)
    }

    pub fn scaled_lr(&self, n_gpus: u64) -> Result<f64, GridError> {
        scale_lr(self.base_lr, n_gpus as i64)
    }
}

/// `count` placeholder specs with ids `0..count`.
pub fn placeholder_grid(count: usize) -> Vec<ExperimentSpec> {
    (0..count).map(ExperimentSpec::placeholder).collect()
}

/// Expands `space` into all of its grid points, row-major over the
/// declared axis order.
pub fn cross_product(space: &HyperSpace) -> Result<Vec<ExperimentSpec>, GridError> {
    // Re-validate: HyperSpace fields are private but cheap to check.
    let space = HyperSpace::new(space.axes.clone())?;
    let radices: Vec<usize> = space.axes.iter().map(|a| a.values.len()).collect();
    let total = space.size();
    let mut specs = Vec::with_capacity(total);
    let mut digits = vec![0usize; radices.len()];
    for id in 0..total {
        let mut spec = ExperimentSpec::placeholder(id);
        for (axis, &d) in space.axes.iter().zip(&digits) {
            let value = axis.values[d].clone();
            apply_override(&mut spec, &axis.name, &value)?;
            spec.assignment.insert(axis.name.clone(), value);
        }
        specs.push(spec);
        // odometer increment, last axis fastest
        for k in (0..digits.len()).rev() {
            digits[k] += 1;
            if digits[k] < radices[k] {
                break;
            }
            digits[k] = 0;
        }
    }
    Ok(specs)
}

fn apply_override(spec: &mut ExperimentSpec, axis: &str, value: &Scalar) -> Result<(), GridError> {
    let bad = |what| GridError::BadOverride {
        axis: axis.to_string(),
        value: value.to_string(),
        what,
    };
    match axis {
        BATCH_AXIS => match value.as_i64() {
            Some(b) if b >= 1 => spec.per_replica_batch = b as u64,
            _ => return Err(bad("a per-replica batch")),
        },
        EPOCHS_AXIS => match value.as_i64() {
            Some(e) if e >= 1 => spec.epochs = e as u64,
            _ => return Err(bad("an epoch count")),
        },
        LR_AXIS => match value.as_f64() {
            Some(lr) if lr > 0.0 && lr.is_finite() => spec.base_lr = lr,
            _ => return Err(bad("a learning rate")),
        },
        _ => {}
    }
    Ok(())
}

/// Global batch when `per_replica_batch` samples are placed on each of
/// `n_gpus` replicas.
pub fn scale_global_batch(per_replica_batch: i64, n_gpus: i64) -> Result<u64, GridError> {
    if per_replica_batch < 1 {
        return Err(GridError::InvalidCount(per_replica_batch));
    }
    if n_gpus < 1 {
        return Err(GridError::InvalidCount(n_gpus));
    }
    Ok(per_replica_batch as u64 * n_gpus as u64)
}

/// Linear learning-rate scaling with the replica count.
pub fn scale_lr(base_lr: f64, n_gpus: i64) -> Result<f64, GridError> {
    if !(base_lr > 0.0 && base_lr.is_finite()) {
        return Err(GridError::InvalidRate(base_lr));
    }
    if n_gpus < 1 {
        return Err(GridError::InvalidCount(n_gpus));
    }
    Ok(base_lr * n_gpus as f64)
}

/// Renders specs as CSV: `id`, one column per axis, `global_batch`, `lr`,
/// with the batch and rate scaled for `n_gpus`.
pub fn specs_to_csv(space: &HyperSpace, specs: &[ExperimentSpec], n_gpus: u64) -> Result<String, GridError> {
    let mut out = String::from("id");
    for axis in &space.axes {
        out.push(',');
        out.push_str(&axis.name);
    }
    out.push_str(",global_batch,lr\n");
    for spec in specs {
        out.push_str(&spec.id.to_string());
        for axis in &space.axes {
            out.push(',');
            if let Some(v) = spec.assignment.get(&axis.name) {
                out.push_str(&v.to_string());
            }
        }
        out.push_str(&format!(
            ",{},{}\n",
            spec.global_batch(n_gpus)?,
            format_real(spec.scaled_lr(n_gpus)?)
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ints(v: &[i64]) -> Vec<Scalar> {
        v.iter().map(|&i| Scalar::Integer(i)).collect()
    }

    fn toks(v: &[&str]) -> Vec<Scalar> {
        v.iter().map(|s| Scalar::Token(s.to_string())).collect()
    }

    #[test]
    fn single_axis() {
        let lrs = [1e-4, 1e-3, 1e-2].iter().map(|&x| Scalar::real(x)).collect();
        let space = HyperSpace::new(vec![HyperAxis::new("lr", lrs).unwrap()]).unwrap();
        let specs = cross_product(&space).unwrap();
        assert_eq!(specs.len(), 3);
        assert_eq!(specs.iter().map(|s| s.id).collect::<Vec<_>>(), vec![0, 1, 2]);
        assert_eq!(specs[1].base_lr, 1e-3);
    }

    #[test]
    fn row_major_order() {
        let space = HyperSpace::new(vec![
            HyperAxis::new("a", ints(&[1, 2])).unwrap(),
            HyperAxis::new("b", toks(&["x", "y", "z"])).unwrap(),
        ])
        .unwrap();
        let specs = cross_product(&space).unwrap();
        assert_eq!(specs.len(), 6);
        assert_eq!(specs[4].assignment["a"], Scalar::Integer(2));
        assert_eq!(specs[4].assignment["b"], Scalar::Token("y".into()));
    }

    #[test]
    fn empty_and_duplicate_axes_rejected() {
        assert_eq!(HyperAxis::new("a", vec![]), Err(GridError::EmptyAxis("a".into())));
        let a = HyperAxis::new("a", ints(&[1])).unwrap();
        assert_eq!(
            HyperSpace::new(vec![a.clone(), a]),
            Err(GridError::DuplicateAxis("a".into()))
        );
        assert!(matches!(
            HyperAxis::new("a", ints(&[1, 1])),
            Err(GridError::DuplicateValue { .. })
        ));
        assert_eq!(HyperSpace::new(vec![]), Err(GridError::NoAxes));
    }

    #[test]
    fn reals_compare_by_representation() {
        // 0.1 and 0.10 normalise to the same shortest form
        assert_eq!(Scalar::real(0.1), Scalar::real(0.10));
        assert_ne!(Scalar::Real("0.1".into()), Scalar::Integer(0));
        assert_eq!(format_real(2.0), "2.0");
        assert_eq!(format_real(1e-4), "0.0001");
    }

    #[test]
    fn overrides_apply() {
        let space = HyperSpace::new(vec![
            HyperAxis::new("epochs", ints(&[10, 20])).unwrap(),
            HyperAxis::new("batch", ints(&[1])).unwrap(),
        ])
        .unwrap();
        let specs = cross_product(&space).unwrap();
        assert_eq!(specs[1].epochs, 20);
        assert_eq!(specs[0].per_replica_batch, 1);

        let bad = HyperSpace::new(vec![HyperAxis::new("epochs", toks(&["many"])).unwrap()]).unwrap();
        assert!(matches!(cross_product(&bad), Err(GridError::BadOverride { .. })));
    }

    #[test]
    fn scaling_examples() {
        assert_eq!(scale_global_batch(2, 1), Ok(2));
        assert_eq!(scale_global_batch(2, 16), Ok(32));
        assert_eq!(scale_global_batch(3, 7), Ok(21));
        assert_eq!(scale_global_batch(0, 7), Err(GridError::InvalidCount(0)));
        assert_eq!(scale_global_batch(2, -1), Err(GridError::InvalidCount(-1)));

        assert_eq!(scale_lr(1e-4, 1), Ok(1e-4));
        assert_eq!(scale_lr(1e-4, 4), Ok(4e-4));
        assert!((scale_lr(1e-4, 32).unwrap() - 3.2e-3).abs() < 1e-18);
        assert_eq!(scale_lr(0.0, 4), Err(GridError::InvalidRate(0.0)));
        assert_eq!(scale_lr(1e-4, 0), Err(GridError::InvalidCount(0)));
    }

    #[test]
    fn csv_layout() {
        let space = HyperSpace::new(vec![HyperAxis::new("opt", toks(&["adam", "sgd"])).unwrap()]).unwrap();
        let specs = cross_product(&space).unwrap();
        let csv = specs_to_csv(&space, &specs, 4).unwrap();
        assert_eq!(csv, "id,opt,global_batch,lr\n0,adam,8,0.0004\n1,sgd,8,0.0004\n");
    }
}
