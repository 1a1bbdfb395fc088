use std::path::Path;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{GmmSpec, PriorSpec};
use crate::dynsys::{write_atomic, ParamPoint};
use crate::error::{Error, Result};

/// Observations `y⁽ⁱ⁾ ∈ ℝᵈ`, with optional true labels in `1..=M`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    dim: usize,
    points: Vec<f64>,
    labels: Option<Vec<usize>>,
}

impl Dataset {
    pub fn new(dim: usize, points: Vec<Vec<f64>>, labels: Option<Vec<usize>>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("dataset dimension must be positive".into()));
        }
        if let Some(i) = points.iter().position(|p| p.len() != dim) {
            return Err(Error::InvalidArgument(format!("point {i} has wrong length")));
        }
        if let Some(i) = points.iter().position(|p| p.iter().any(|x| !x.is_finite())) {
            return Err(Error::InvalidArgument(format!("point {i} is not finite")));
        }
        if let Some(l) = &labels {
            if l.len() != points.len() {
                return Err(Error::InvalidArgument("one label per point required".into()));
            }
            if l.contains(&0) {
                return Err(Error::InvalidArgument("labels are 1-based".into()));
            }
        }
        Ok(Dataset {
            dim,
            points: points.concat(),
            labels,
        })
    }

    pub fn empty(dim: usize) -> Self {
        Dataset {
            dim,
            points: Vec::new(),
            labels: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points(&self) -> impl Iterator<Item = &[f64]> {
        self.points.chunks(self.dim)
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    /// CSV with columns `x_0..x_{d-1}` and `label` when labels are present.
    pub fn to_csv_string(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header: Vec<String> = (0..self.dim).map(|j| format!("x_{j}")).collect();
        if self.labels.is_some() {
            header.push("label".into());
        }
        w.write_record(&header).map_err(csv_err)?;
        for (i, p) in self.points().enumerate() {
            let mut rec: Vec<String> = p.iter().map(|x| crate::dynsys::fmt17(*x)).collect();
            if let Some(l) = &self.labels {
                rec.push(l[i].to_string());
            }
            w.write_record(&rec).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv_string()?.as_bytes())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let parse = |message: String| Error::Parse {
            path: path.to_path_buf(),
            message,
        };
        let mut rdr = csv::Reader::from_path(path).map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => Error::io(path, std::io::Error::other(e.to_string())),
            _ => parse(e.to_string()),
        })?;
        let header = rdr.headers().map_err(|e| parse(e.to_string()))?.clone();
        let has_label = header.iter().next_back() == Some("label");
        let dim = header.len() - usize::from(has_label);
        for (j, h) in header.iter().take(dim).enumerate() {
            if h != format!("x_{j}") {
                return Err(parse(format!("unexpected column `{h}`, expected `x_{j}`")));
            }
        }
        let mut points = Vec::new();
        let mut labels = Vec::new();
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| parse(e.to_string()))?;
            let p = rec
                .iter()
                .take(dim)
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| parse(format!("row {}: {e}", row + 1)))?;
            points.push(p);
            if has_label {
                let l = rec
                    .get(dim)
                    .unwrap_or("")
                    .trim()
                    .parse::<usize>()
                    .map_err(|e| parse(format!("row {}: label: {e}", row + 1)))?;
                labels.push(l);
            }
        }
        Dataset::new(dim, points, has_label.then_some(labels)).map_err(|e| parse(e.to_string()))
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::InvalidArgument(e.to_string())
}

fn check_means(spec: &GmmSpec, true_means: &ParamPoint) -> Result<()> {
    if true_means.len() != spec.state_dim() {
        return Err(Error::DimensionMismatch {
            expected: spec.state_dim(),
            got: true_means.len(),
        });
    }
    Ok(())
}

/// Draw `n` i.i.d. points from the mixture with means `true_means`.
pub fn sample_dataset(spec: &GmmSpec, true_means: &ParamPoint, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::InvalidArgument("n must be at least 1".into()));
    }
    check_means(spec, true_means)?;
    let d = spec.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut class = spec.m_components() - 1;
        for (m, w) in spec.weights().iter().enumerate() {
            acc += w;
            if u < acc {
                class = m;
                break;
            }
        }
        let z = DVector::<f64>::from_fn(d, |_, _| rng.sample(StandardNormal));
        let offset = spec.spd(class).lower() * z;
        let mean = &true_means.as_slice()[class * d..(class + 1) * d];
        points.push(mean.iter().zip(offset.iter()).map(|(m, o)| m + o).collect());
        labels.push(class + 1);
    }
    Dataset::new(d, points, Some(labels))
}

/// Gaussian prior with `Σ_{m,0} = prior_sigma²·I` and means drawn from
/// `N(θ_m, Σ_{m,0})`. The same seed yields the same standard-normal draws
/// for every `prior_sigma`.
pub fn sample_prior_means(
    spec: &GmmSpec,
    true_means: &ParamPoint,
    prior_sigma: f64,
    seed: u64,
) -> Result<PriorSpec> {
    if !(prior_sigma > 0.0) || !prior_sigma.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "prior_sigma must be positive, got {prior_sigma}"
        )));
    }
    check_means(spec, true_means)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means = true_means
        .as_slice()
        .chunks(spec.dim())
        .map(|mu| {
            mu.iter()
                .map(|m| m + prior_sigma * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();
    PriorSpec::isotropic(means, prior_sigma * prior_sigma)
}
