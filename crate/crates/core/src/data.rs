//! Domain datasets: synthetic generation with rotation shift, CSV ingestion,
//! and seeded without-replacement sampling.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Axis};
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seeds::{stream_rng, Stream};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: {msg}")]
    Malformed { line: u64, msg: String },
    #[error("no samples")]
    NoSamples,
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("requested {requested} samples but only {available} available")]
    TooFew { requested: usize, available: usize },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DomainRole {
    Source,
    TargetTrain,
    TargetTest,
}

impl DomainRole {
    pub fn as_str(&self) -> &'static str {
        match self {
            DomainRole::Source => "source",
            DomainRole::TargetTrain => "target-train",
            DomainRole::TargetTest => "target-test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "source" => Some(DomainRole::Source),
            "target-train" => Some(DomainRole::TargetTrain),
            "target-test" => Some(DomainRole::TargetTest),
            _ => None,
        }
    }
}

/// One domain: samples as rows, labels where known.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    pub domain_id: String,
    pub x: Array2<f64>,
    pub labels: Vec<Option<usize>>,
    pub role: DomainRole,
}

impl DomainDataset {
    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn is_labeled(&self) -> bool {
        self.labels.iter().all(Option::is_some)
    }

    /// All labels, if every row has one.
    pub fn label_vec(&self) -> Option<Vec<usize>> {
        self.labels.iter().copied().collect()
    }

    pub fn max_label(&self) -> Option<usize> {
        self.labels.iter().flatten().copied().max()
    }

    pub fn rows(&self, indices: &[usize]) -> Array2<f64> {
        self.x.select(Axis(0), indices)
    }

    pub fn labels_at(&self, indices: &[usize]) -> Option<Vec<usize>> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }

    /// Same samples with labels stripped (what the server sees of the target).
    pub fn unlabeled(&self) -> Self {
        Self { labels: vec![None; self.len()], ..self.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub dim: usize,
    pub classes: usize,
    /// Expected distance between two class means is `2 * mean_scale`.
    pub mean_scale: f64,
    pub noise: f64,
    /// Rotation angle (degrees) of each source domain.
    pub source_angles: Vec<f64>,
    pub target_angle: f64,
    /// Number of Givens planes composed into each domain rotation.
    pub rotation_planes: usize,
    pub samples_per_source: usize,
    pub target_train: usize,
    pub target_test: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            dim: 20,
            classes: 5,
            mean_scale: 3.0,
            noise: 1.0,
            source_angles: vec![15.0, 30.0, 45.0, 60.0],
            target_angle: 75.0,
            rotation_planes: 40,
            samples_per_source: 2000,
            target_train: 1024,
            target_test: 1000,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::InvalidSpec(m.to_string()));
        if self.dim < 2 {
            return bad("dim must be at least 2");
        }
        if self.classes < 2 {
            return bad("classes must be at least 2");
        }
        if self.source_angles.is_empty() {
            return bad("need at least one source domain");
        }
        let angle_ok = |a: f64| (0.0..180.0).contains(&a);
        if !self.source_angles.iter().copied().all(angle_ok) || !angle_ok(self.target_angle) {
            return bad("angles must lie in [0, 180)");
        }
        if !(self.mean_scale.is_finite() && self.mean_scale >= 0.0) || !(self.noise.is_finite() && self.noise >= 0.0) {
            return bad("mean_scale and noise must be finite and non-negative");
        }
        if self.samples_per_source == 0 || self.target_train == 0 || self.target_test == 0 {
            return bad("sample counts must be positive");
        }
        Ok(())
    }

    pub fn sources(&self) -> usize {
        self.source_angles.len()
    }
}

/// Composition of Givens rotations by a common angle over a fixed plane sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneRotation {
    planes: Vec<(usize, usize)>,
}

impl PlaneRotation {
    pub fn random<R: Rng>(dim: usize, count: usize, rng: &mut R) -> Self {
        let planes = (0..count)
            .map(|_| {
                let p = rng.random_range(0..dim);
                let mut q = rng.random_range(0..dim - 1);
                if q >= p {
                    q += 1;
                }
                (p, q)
            })
            .collect();
        Self { planes }
    }

    pub fn planes(&self) -> &[(usize, usize)] {
        &self.planes
    }

    pub fn apply(&self, x: &mut Array2<f64>, degrees: f64) {
        if degrees == 0.0 {
            return;
        }
        let (s, c) = degrees.to_radians().sin_cos();
        for mut row in x.rows_mut() {
            for &(p, q) in &self.planes {
                let (a, b) = (row[p], row[q]);
                row[p] = c * a - s * b;
                row[q] = s * a + c * b;
            }
        }
    }
}

fn gaussian_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || {
        let z: f64 = StandardNormal.sample(rng);
        std * z
    })
}

/// Sources in order, then target-train and target-test.
///
/// Class means are shared by every domain; each domain rotates its samples
/// `mean[y] + noise` by its own angle along one shared plane sequence.
pub fn generate_synthetic_domains(spec: &SyntheticSpec, seed: u64) -> Result<Vec<DomainDataset>, DataError> {
    spec.validate()?;
    let mut geometry = stream_rng(seed, Stream::Data, 0);
    let mean_std = spec.mean_scale * (2.0 / spec.dim as f64).sqrt();
    let means = gaussian_matrix(&mut geometry, spec.classes, spec.dim, mean_std);
    let rotation = PlaneRotation::random(spec.dim, spec.rotation_planes, &mut geometry);

    let draw = |domain_index: u64, n: usize, angle: f64| {
        let mut rng = stream_rng(seed, Stream::Data, 1 + domain_index);
        let labels: Vec<usize> = (0..n).map(|i| i % spec.classes).collect();
        let mut x = gaussian_matrix(&mut rng, n, spec.dim, spec.noise);
        for (mut row, &y) in x.rows_mut().into_iter().zip(&labels) {
            row += &means.row(y);
        }
        rotation.apply(&mut x, angle);
        (x, labels)
    };

    let mut out = Vec::with_capacity(spec.sources() + 2);
    for (d, &angle) in spec.source_angles.iter().enumerate() {
        let (x, y) = draw(d as u64, spec.samples_per_source, angle);
        out.push(DomainDataset {
            domain_id: format!("source{d}"),
            x,
            labels: y.into_iter().map(Some).collect(),
            role: DomainRole::Source,
        });
    }
    let n_target = spec.target_train + spec.target_test;
    let (x, y) = draw(spec.sources() as u64, n_target, spec.target_angle);
    let split = spec.target_train;
    out.push(DomainDataset {
        domain_id: "target".into(),
        x: x.slice(ndarray::s![..split, ..]).to_owned(),
        labels: y[..split].iter().map(|&l| Some(l)).collect(),
        role: DomainRole::TargetTrain,
    });
    out.push(DomainDataset {
        domain_id: "target".into(),
        x: x.slice(ndarray::s![split.., ..]).to_owned(),
        labels: y[split..].iter().map(|&l| Some(l)).collect(),
        role: DomainRole::TargetTest,
    });
    Ok(out)
}

/// Parse a domain CSV: header `label,f0,...`, one sample per line, label -1
/// for unlabeled rows.
pub fn parse_domain_csv<R: Read>(reader: R, domain_id: &str, role: DomainRole) -> Result<DomainDataset, DataError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.get(0).map(str::trim) != Some("label") {
        return Err(DataError::Malformed { line: 1, msg: "header must start with `label`".into() });
    }
    let width = header.len() - 1;
    if width == 0 {
        return Err(DataError::Malformed { line: 1, msg: "header names no feature columns".into() });
    }

    let mut values = Vec::new();
    let mut labels = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.len() == 1 && rec.get(0).map(str::trim) == Some("") {
            continue;
        }
        if rec.len() != width + 1 {
            return Err(DataError::Malformed {
                line,
                msg: format!("expected {width} features, found {}", rec.len().saturating_sub(1)),
            });
        }
        let label: i64 = rec[0]
            .trim()
            .parse()
            .map_err(|_| DataError::Malformed { line, msg: format!("bad label `{}`", &rec[0]) })?;
        labels.push(match label {
            -1 => None,
            l if l >= 0 => Some(l as usize),
            l => return Err(DataError::Malformed { line, msg: format!("label {l} must be >= 0 or -1") }),
        });
        for field in rec.iter().skip(1) {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| DataError::Malformed { line, msg: format!("bad number `{field}`") })?;
            if !v.is_finite() {
                return Err(DataError::Malformed { line, msg: format!("non-finite value `{field}`") });
            }
            values.push(v);
        }
    }
    if labels.is_empty() {
        return Err(DataError::NoSamples);
    }
    let x = Array2::from_shape_vec((labels.len(), width), values).expect("row widths checked");
    Ok(DomainDataset { domain_id: domain_id.to_string(), x, labels, role })
}

pub fn load_domain_csv(path: &Path, domain_id: &str, role: DomainRole) -> Result<DomainDataset, DataError> {
    let f = fs::File::open(path).map_err(|source| DataError::Io { path: path.to_path_buf(), source })?;
    parse_domain_csv(f, domain_id, role)
}

pub fn write_domain_csv(dataset: &DomainDataset, path: &Path) -> Result<(), DataError> {
    let io = |source| DataError::Io { path: path.to_path_buf(), source };
    let mut out = String::new();
    out.push_str("label");
    for j in 0..dataset.dim() {
        out.push_str(&format!(",f{j}"));
    }
    out.push('\n');
    for (row, label) in dataset.x.rows().into_iter().zip(&dataset.labels) {
        match label {
            Some(l) => out.push_str(&l.to_string()),
            None => out.push_str("-1"),
        }
        for v in row {
            out.push(',');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    let mut f = fs::File::create(path).map_err(io)?;
    f.write_all(out.as_bytes()).map_err(io)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub domain_id: String,
    pub path: PathBuf,
    pub role: DomainRole,
}

/// Manifest CSV: header `domain_id,path,role`; relative paths resolve
/// against the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>, DataError> {
    let f = fs::File::open(path).map_err(|source| DataError::Io { path: path.to_path_buf(), source })?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut rdr = csv::Reader::from_reader(f);
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.len() != 3 {
            return Err(DataError::Malformed { line, msg: "manifest rows need domain_id,path,role".into() });
        }
        let role = DomainRole::parse(&rec[2])
            .ok_or_else(|| DataError::Malformed { line, msg: format!("unknown role `{}`", &rec[2]) })?;
        let p = PathBuf::from(rec[1].trim());
        out.push(ManifestEntry { domain_id: rec[0].trim().to_string(), path: if p.is_absolute() { p } else { base.join(p) }, role });
    }
    Ok(out)
}

pub fn load_manifest_datasets(path: &Path) -> Result<Vec<DomainDataset>, DataError> {
    load_manifest(path)?
        .into_iter()
        .map(|e| load_domain_csv(&e.path, &e.domain_id, e.role))
        .collect()
}

/// Write every dataset as `<domain_id>_<role>.csv` plus `manifest.csv`.
pub fn write_dataset_dir(datasets: &[DomainDataset], dir: &Path) -> Result<PathBuf, DataError> {
    fs::create_dir_all(dir).map_err(|source| DataError::Io { path: dir.to_path_buf(), source })?;
    let mut manifest = String::from("domain_id,path,role\n");
    for d in datasets {
        let name = format!("{}_{}.csv", d.domain_id, d.role.as_str());
        write_domain_csv(d, &dir.join(&name))?;
        manifest.push_str(&format!("{},{},{}\n", d.domain_id, name, d.role.as_str()));
    }
    let mpath = dir.join("manifest.csv");
    fs::write(&mpath, manifest).map_err(|source| DataError::Io { path: mpath.clone(), source })?;
    Ok(mpath)
}

/// Draw `n` distinct indices from `0..len` in draw order.
pub fn sample_indices<R: Rng>(len: usize, rng: &mut R, n: usize) -> Result<Vec<usize>, DataError> {
    if n > len {
        return Err(DataError::TooFew { requested: n, available: len });
    }
    Ok(sample(rng, len, n).into_vec())
}

/// A per-round pool of indices, consumed in consecutive batches.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoundPool {
    pub indices: Vec<usize>,
    pub batch_size: usize,
}

impl RoundPool {
    pub fn draw<R: Rng>(len: usize, rng: &mut R, batches: usize, batch_size: usize) -> Result<Self, DataError> {
        Ok(Self { indices: sample_indices(len, rng, batches * batch_size)?, batch_size })
    }

    pub fn batch(&self, b: usize) -> &[usize] {
        &self.indices[b * self.batch_size..(b + 1) * self.batch_size]
    }

    /// Consecutive batches `first..first + count` as one slice.
    pub fn span(&self, first: usize, count: usize) -> &[usize] {
        &self.indices[first * self.batch_size..(first + count) * self.batch_size]
    }

    pub fn num_batches(&self) -> usize {
        self.indices.len() / self.batch_size
    }
}

/// Row norms, for rotation checks.
pub fn row_norms(x: &Array2<f64>) -> Array1<f64> {
    x.map_axis(Axis(1), |r| r.dot(&r).sqrt())
}
