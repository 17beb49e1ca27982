//! FSCIL data model: synthetic datasets, session plans and per-session batches.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DATASET_FILE: &str = "dataset.csv";
pub const META_FILE: &str = "meta.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: Vec<f64>,
    pub class_id: usize,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorParams {
    pub n_classes: usize,
    pub input_dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub spread: f64,
    pub seed: u64,
}

impl Default for GeneratorParams {
    fn default() -> Self {
        Self {
            n_classes: 40,
            input_dim: 32,
            train_per_class: 100,
            test_per_class: 50,
            spread: 0.2,
            seed: 7,
        }
    }
}

impl GeneratorParams {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_classes", self.n_classes),
            ("input_dim", self.input_dim),
            ("train_per_class", self.train_per_class),
            ("test_per_class", self.test_per_class),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        if !(self.spread > 0.0 && self.spread.is_finite()) {
            return Err(Error::invalid("spread must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub input_dim: usize,
    pub n_classes: usize,
    pub seed: Option<u64>,
    pub generator_params: Option<GeneratorParams>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    input_dim: usize,
    n_classes: usize,
    samples: Vec<Sample>,
    meta: DatasetMeta,
}

impl Dataset {
    /// Validates class contiguity, dimensions and train/test coverage.
    pub fn new(input_dim: usize, samples: Vec<Sample>, meta: Option<DatasetMeta>) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::Schema("input_dim must be positive".into()));
        }
        let mut seen: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
        for (i, s) in samples.iter().enumerate() {
            if s.features.len() != input_dim {
                return Err(Error::Schema(format!(
                    "sample {i} has {} features, expected {input_dim}",
                    s.features.len()
                )));
            }
            if s.features.iter().any(|v| !v.is_finite()) {
                return Err(Error::Schema(format!("sample {i} has a non-finite feature")));
            }
            let entry = seen.entry(s.class_id).or_default();
            match s.split {
                Split::Train => entry.0 += 1,
                Split::Test => entry.1 += 1,
            }
        }
        let n_classes = seen.len();
        if n_classes == 0 {
            return Err(Error::Schema("dataset has no samples".into()));
        }
        if seen.keys().copied().ne(0..n_classes) {
            return Err(Error::Schema("class ids must be contiguous from 0".into()));
        }
        for (c, (train, test)) in &seen {
            if *train > 0 && *test == 0 {
                return Err(Error::Schema(format!("class {c} has training but no test samples")));
            }
        }
        let meta = meta.unwrap_or(DatasetMeta {
            input_dim,
            n_classes,
            seed: None,
            generator_params: None,
        });
        if meta.input_dim != input_dim || meta.n_classes != n_classes {
            return Err(Error::Schema(format!(
                "meta declares {}x{} (dim x classes) but data has {input_dim}x{n_classes}",
                meta.input_dim, meta.n_classes
            )));
        }
        Ok(Self {
            input_dim,
            n_classes,
            samples,
            meta,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn meta(&self) -> &DatasetMeta {
        &self.meta
    }

    /// Sample indices of one class and split, in file order.
    pub fn indices_of(&self, class_id: usize, split: Split) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.class_id == class_id && s.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.samples.iter().filter(|s| s.split == split).count()
    }
}

/// Class means uniform on the unit sphere; samples isotropic Gaussian around them.
pub fn generate_synthetic(params: &GeneratorParams) -> Result<Dataset> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let noise = Normal::new(0.0, params.spread).map_err(|e| Error::invalid(e.to_string()))?;
    let mut samples = Vec::with_capacity(params.n_classes * (params.train_per_class + params.test_per_class));
    for class_id in 0..params.n_classes {
        let mean = loop {
            let v: Vec<f64> = (0..params.input_dim)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            let n = crate::linalg::norm(&v);
            if n > 1e-12 {
                break v.into_iter().map(|x| x / n).collect::<Vec<f64>>();
            }
        };
        for (split, count) in [
            (Split::Train, params.train_per_class),
            (Split::Test, params.test_per_class),
        ] {
            for _ in 0..count {
                let features = mean.iter().map(|m| m + noise.sample(&mut rng)).collect();
                samples.push(Sample {
                    features,
                    class_id,
                    split,
                });
            }
        }
    }
    let meta = DatasetMeta {
        input_dim: params.input_dim,
        n_classes: params.n_classes,
        seed: Some(params.seed),
        generator_params: Some(params.clone()),
    };
    Dataset::new(params.input_dim, samples, Some(meta))
}

/// Ordered, disjoint class sets: one base session then `way`-class increments.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionPlan {
    pub base_classes: usize,
    pub way: usize,
    pub shot: usize,
    pub class_order: Vec<usize>,
    pub sessions: Vec<Vec<usize>>,
}

impl SessionPlan {
    pub fn n_sessions(&self) -> usize {
        self.sessions.len()
    }

    /// Classes introduced in sessions `1..=t` (1-based).
    pub fn seen_classes(&self, t: usize) -> Vec<usize> {
        self.sessions[..t].concat()
    }

    /// 1-based session that introduces `class_id`.
    pub fn session_of(&self, class_id: usize) -> Option<usize> {
        self.sessions.iter().position(|s| s.contains(&class_id)).map(|i| i + 1)
    }
}

/// Mixes a run seed with stream tags into an independent generator seed.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    let mut h = seed ^ 0x9E37_79B9_7F4A_7C15;
    for &t in tags {
        h = splitmix(h ^ splitmix(t.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_PLAN: u64 = 1;
const STREAM_SHOTS: u64 = 2;

pub fn make_plan(dataset: &Dataset, base_classes: usize, way: usize, shot: usize, seed: u64) -> Result<SessionPlan> {
    let n = dataset.n_classes();
    if base_classes == 0 || base_classes > n {
        return Err(Error::invalid(format!(
            "base_classes {base_classes} must be in 1..={n}"
        )));
    }
    if way == 0 || shot == 0 {
        return Err(Error::invalid("way and shot must be positive"));
    }
    let mut class_order: Vec<usize> = (0..n).collect();
    class_order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[STREAM_PLAN])));
    let increments = (n - base_classes) / way;
    let mut sessions = vec![class_order[..base_classes].to_vec()];
    for k in 0..increments {
        let start = base_classes + k * way;
        sessions.push(class_order[start..start + way].to_vec());
    }
    for &c in sessions.iter().skip(1).flatten() {
        let available = dataset.indices_of(c, Split::Train).len();
        if available < shot {
            return Err(Error::invalid(format!(
                "class {c} has {available} training samples, fewer than shot {shot}"
            )));
        }
    }
    Ok(SessionPlan {
        base_classes,
        way,
        shot,
        class_order,
        sessions,
    })
}

/// Training data available in one session plus the cumulative test set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SessionBatch {
    /// 1-based session index.
    pub session: usize,
    pub classes: Vec<usize>,
    /// Indices into the dataset's samples.
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn session_batch(dataset: &Dataset, plan: &SessionPlan, t: usize, seed: u64) -> Result<SessionBatch> {
    if t == 0 || t > plan.n_sessions() {
        return Err(Error::invalid(format!(
            "session {t} out of range 1..={}",
            plan.n_sessions()
        )));
    }
    let classes = plan.sessions[t - 1].clone();
    let mut train = Vec::new();
    for &c in &classes {
        let mut idx = dataset.indices_of(c, Split::Train);
        if t > 1 {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[STREAM_SHOTS, t as u64, c as u64]));
            idx.shuffle(&mut rng);
            idx.truncate(plan.shot);
            idx.sort_unstable();
        }
        train.extend(idx);
    }
    let test = plan
        .seen_classes(t)
        .into_iter()
        .flat_map(|c| dataset.indices_of(c, Split::Test))
        .collect();
    Ok(SessionBatch {
        session: t,
        classes,
        train,
        test,
    })
}

fn format_row(out: &mut String, s: &Sample) {
    out.push_str(s.split.as_str());
    let _ = write!(out, ",{}", s.class_id);
    for v in &s.features {
        let _ = write!(out, ",{v:.16e}");
    }
    out.push('\n');
}

/// Renders the CSV body: header `split,class_id,f0,...` then one row per sample.
pub fn to_csv(dataset: &Dataset) -> String {
    let mut out = String::from("split,class_id");
    for k in 0..dataset.input_dim {
        let _ = write!(out, ",f{k}");
    }
    out.push('\n');
    for s in &dataset.samples {
        format_row(&mut out, s);
    }
    out
}

/// Parses the CSV body; returns the declared dimension and samples.
pub fn parse_csv(text: &str) -> Result<(usize, Vec<Sample>)> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        message: "empty file".into(),
    })?;
    let cols: Vec<&str> = header.trim_end_matches('\r').split(',').collect();
    if cols.len() < 3 || cols[0] != "split" || cols[1] != "class_id" {
        return Err(Error::Parse {
            line: 1,
            message: "header must start with split,class_id and name at least one feature".into(),
        });
    }
    for (k, c) in cols[2..].iter().enumerate() {
        if *c != format!("f{k}") {
            return Err(Error::Parse {
                line: 1,
                message: format!("feature column {k} should be named f{k}, found {c:?}"),
            });
        }
    }
    let dim = cols.len() - 2;
    let mut samples = Vec::new();
    for (i, raw) in lines {
        let line = i + 1;
        let raw = raw.trim_end_matches('\r');
        if raw.is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split(',').collect();
        if fields.len() != dim + 2 {
            return Err(Error::Parse {
                line,
                message: format!("row has {} fields, expected {}", fields.len(), dim + 2),
            });
        }
        let split = match fields[0] {
            "train" => Split::Train,
            "test" => Split::Test,
            other => {
                return Err(Error::Parse {
                    line,
                    message: format!("unknown split {other:?}"),
                })
            }
        };
        let class_id = fields[1].parse().map_err(|_| Error::Parse {
            line,
            message: format!("bad class_id {:?}", fields[1]),
        })?;
        let features = fields[2..]
            .iter()
            .map(|f| {
                f.parse::<f64>().map_err(|_| Error::Parse {
                    line,
                    message: format!("bad feature value {f:?}"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        samples.push(Sample {
            features,
            class_id,
            split,
        });
    }
    Ok((dim, samples))
}

/// Writes `dataset.csv` and `meta.json` into `dir`.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv_path = dir.join(DATASET_FILE);
    std::fs::write(&csv_path, to_csv(dataset)).map_err(|e| Error::io(&csv_path, e))?;
    let meta_path = dir.join(META_FILE);
    let meta = serde_json::to_string_pretty(&dataset.meta)?;
    std::fs::write(&meta_path, meta + "\n").map_err(|e| Error::io(&meta_path, e))
}

/// Loads a dataset from a directory (CSV plus optional meta) or a CSV file path.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let (csv_path, meta_path): (PathBuf, PathBuf) = if path.is_dir() {
        (path.join(DATASET_FILE), path.join(META_FILE))
    } else {
        let dir = path.parent().unwrap_or(Path::new("."));
        (path.to_path_buf(), dir.join(META_FILE))
    };
    let text = std::fs::read_to_string(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    let (dim, samples) = parse_csv(&text)?;
    let meta = if meta_path.is_file() {
        let m = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        Some(serde_json::from_str::<DatasetMeta>(&m)?)
    } else {
        None
    };
    Dataset::new(dim, samples, meta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{mean, squared_distance};

    fn small_params() -> GeneratorParams {
        GeneratorParams {
            n_classes: 10,
            input_dim: 16,
            train_per_class: 20,
            test_per_class: 10,
            spread: 0.05,
            seed: 3,
        }
    }

    #[test]
    fn generation_is_deterministic_and_counts_match() {
        let a = generate_synthetic(&small_params()).unwrap();
        let b = generate_synthetic(&small_params()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.count(Split::Train), 200);
        assert_eq!(a.count(Split::Test), 100);
        let mut other = small_params();
        other.seed = 4;
        assert_ne!(generate_synthetic(&other).unwrap(), a);
    }

    #[test]
    fn generation_rejects_bad_params() {
        let mut p = small_params();
        p.n_classes = 0;
        assert!(generate_synthetic(&p).is_err());
        let mut p = small_params();
        p.spread = 0.0;
        assert!(generate_synthetic(&p).is_err());
    }

    #[test]
    fn raw_ncm_separates_tight_classes() {
        let d = generate_synthetic(&small_params()).unwrap();
        let centers: Vec<Vec<f64>> = (0..10)
            .map(|c| {
                let xs: Vec<Vec<f64>> = d
                    .indices_of(c, Split::Train)
                    .iter()
                    .map(|&i| d.samples()[i].features.clone())
                    .collect();
                mean(&xs).unwrap()
            })
            .collect();
        let test: Vec<&Sample> = d.samples().iter().filter(|s| s.split == Split::Test).collect();
        let correct = test
            .iter()
            .filter(|s| {
                let pred = (0..10)
                    .min_by(|&a, &b| {
                        squared_distance(&s.features, &centers[a])
                            .total_cmp(&squared_distance(&s.features, &centers[b]))
                    })
                    .unwrap();
                pred == s.class_id
            })
            .count();
        assert!(correct as f64 / test.len() as f64 > 0.95);
    }

    fn dataset_with_classes(n: usize) -> Dataset {
        generate_synthetic(&GeneratorParams {
            n_classes: n,
            input_dim: 2,
            train_per_class: 8,
            test_per_class: 3,
            spread: 0.1,
            seed: 1,
        })
        .unwrap()
    }

    #[test]
    fn session_counts() {
        let d = dataset_with_classes(100);
        assert_eq!(make_plan(&d, 60, 5, 5, 0).unwrap().n_sessions(), 9);
        let d = dataset_with_classes(200);
        assert_eq!(make_plan(&d, 100, 10, 5, 0).unwrap().n_sessions(), 11);
        let d = dataset_with_classes(10);
        assert_eq!(make_plan(&d, 10, 3, 5, 0).unwrap().n_sessions(), 1);
        assert!(make_plan(&d, 11, 3, 5, 0).is_err());
        assert!(make_plan(&d, 4, 3, 9, 0).is_err());
    }

    #[test]
    fn plan_classes_disjoint_and_deterministic() {
        let d = dataset_with_classes(23);
        let p = make_plan(&d, 8, 4, 2, 5).unwrap();
        assert_eq!(p, make_plan(&d, 8, 4, 2, 5).unwrap());
        assert_eq!(p.n_sessions(), 4);
        let mut all = p.seen_classes(p.n_sessions());
        assert_eq!(all.len(), 8 + 3 * 4);
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), 20);
        assert!(p.sessions[1..].iter().all(|s| s.len() == 4));
    }

    #[test]
    fn batches_respect_shot_and_grow_test_set() {
        let d = dataset_with_classes(20);
        let p = make_plan(&d, 10, 5, 5, 2).unwrap();
        let b1 = session_batch(&d, &p, 1, 2).unwrap();
        assert_eq!(b1.train.len(), 10 * 8);
        assert_eq!(b1.test.len(), 10 * 3);
        let b2 = session_batch(&d, &p, 2, 2).unwrap();
        assert_eq!(b2.train.len(), 25);
        assert_eq!(b2.test.len(), 15 * 3);
        assert!(b2.train.iter().all(|&i| p.sessions[1].contains(&d.samples()[i].class_id)));
        assert!(b2.train.iter().all(|&i| d.samples()[i].split == Split::Train));
        assert_eq!(b2, session_batch(&d, &p, 2, 2).unwrap());
        assert!(session_batch(&d, &p, 0, 2).is_err());
        assert!(session_batch(&d, &p, 4, 2).is_err());
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let d = generate_synthetic(&small_params()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&d, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back, d);
        let csv_only = load_dataset(&dir.path().join(DATASET_FILE)).unwrap();
        assert_eq!(csv_only.samples(), d.samples());
    }

    #[test]
    fn wrong_arity_names_the_row() {
        let text = "split,class_id,f0,f1\ntrain,0,1.0,2.0\ntest,0,1.0\n";
        match parse_csv(text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn declared_dim_accepted() {
        let mut text = String::from("split,class_id");
        for k in 0..16 {
            text.push_str(&format!(",f{k}"));
        }
        text.push('\n');
        for split in ["train", "test"] {
            text.push_str(split);
            text.push_str(",0");
            text.push_str(&",0.5".repeat(16));
            text.push('\n');
        }
        let (dim, samples) = parse_csv(&text).unwrap();
        assert_eq!(dim, 16);
        assert!(Dataset::new(dim, samples, None).is_ok());
    }

    #[test]
    fn schema_violations() {
        let s = |c, split| Sample {
            features: vec![0.0],
            class_id: c,
            split,
        };
        assert!(matches!(
            Dataset::new(1, vec![s(0, Split::Train), s(0, Split::Test), s(2, Split::Test)], None),
            Err(Error::Schema(_))
        ));
        assert!(matches!(
            Dataset::new(1, vec![s(0, Split::Train)], None),
            Err(Error::Schema(_))
        ));
        let meta = DatasetMeta {
            input_dim: 2,
            n_classes: 1,
            seed: None,
            generator_params: None,
        };
        assert!(Dataset::new(1, vec![s(0, Split::Train), s(0, Split::Test)], Some(meta)).is_err());
    }
}
