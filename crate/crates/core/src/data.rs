//! Synthetic classification data and CSV feature tables.
//!
//! Labels are 0-based everywhere, in memory and in files.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, streams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    features: Vec<Vec<f64>>,
    labels: Vec<usize>,
    k: usize,
    d: usize,
}

impl Dataset {
    pub fn new(features: Vec<Vec<f64>>, labels: Vec<usize>, k: usize) -> Result<Self> {
        if features.is_empty() {
            return Err(Error::InvalidSpec("dataset needs at least one sample".into()));
        }
        if features.len() != labels.len() {
            return Err(Error::Shape(format!(
                "{} feature rows but {} labels",
                features.len(),
                labels.len()
            )));
        }
        let d = features[0].len();
        if d == 0 {
            return Err(Error::InvalidSpec("feature dimension must be > 0".into()));
        }
        for (i, row) in features.iter().enumerate() {
            if row.len() != d {
                return Err(Error::Shape(format!("row {i} has {} features, expected {d}", row.len())));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidSpec(format!("row {i} has non-finite features")));
            }
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::InvalidSpec(format!("label {bad} out of range for K = {k}")));
        }
        Ok(Self {
            features,
            labels,
            k,
            d,
        })
    }

    pub fn features(&self) -> &[Vec<f64>] {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.k];
        for &y in &self.labels {
            c[y] += 1;
        }
        c
    }

    /// `f1,...,fD,label` rows without a header. Floats use Rust's shortest
    /// round-trip representation.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for (row, y) in self.features.iter().zip(&self.labels) {
            for v in row {
                out.push_str(&format!("{v},"));
            }
            out.push_str(&format!("{y}\n"));
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(self.to_csv().as_bytes())?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    GaussianBlobs,
    Spirals,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    pub generator: Generator,
    pub k: usize,
    pub d: usize,
    pub n: usize,
    pub class_separation: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl DataSpec {
    /// The 10-class, 16-dimensional blobs task used throughout the tests.
    pub fn reference_blobs(seed: u64) -> Self {
        Self {
            generator: Generator::GaussianBlobs,
            k: 10,
            d: 16,
            n: 2000,
            class_separation: 3.0,
            noise_std: 1.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.k < 2 {
            return bad(format!("need K >= 2, got {}", self.k));
        }
        if self.d == 0 {
            return bad("D must be > 0".into());
        }
        if self.n < self.k {
            return bad(format!("need N >= K, got N = {} < K = {}", self.n, self.k));
        }
        if !(self.class_separation > 0.0 && self.class_separation.is_finite()) {
            return bad(format!("class_separation must be > 0, got {}", self.class_separation));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad(format!("noise_std must be >= 0, got {}", self.noise_std));
        }
        if self.generator == Generator::Spirals && self.d != 2 {
            return bad(format!("spirals are two-dimensional, got D = {}", self.d));
        }
        Ok(())
    }
}

/// Class means of the blobs generator, each at distance `sep` from the
/// origin: scaled simplex vertices `sep * e_k` when `D >= K`, otherwise a
/// regular polygon of radius `sep` in the first two coordinates (a line of
/// points `sep` apart when `D == 1`).
pub fn blob_means(k: usize, d: usize, sep: f64) -> Vec<Vec<f64>> {
    (0..k)
        .map(|c| {
            let mut m = vec![0.0; d];
            if d >= k {
                m[c] = sep;
            } else if d >= 2 {
                let angle = 2.0 * std::f64::consts::PI * c as f64 / k as f64;
                m[0] = sep * angle.cos();
                m[1] = sep * angle.sin();
            } else {
                m[0] = sep * (c as f64 - (k - 1) as f64 / 2.0);
            }
            m
        })
        .collect()
}

/// Deterministic `(train, test)` datasets.
///
/// Sample `i` has label `i % K`. Within each class every fifth sample goes
/// to the test split, giving an 80/20 stratified split.
pub fn generate(spec: &DataSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let mut rng = rng::substream(spec.seed, streams::DATA);
    let per_class = spec.n.div_ceil(spec.k);
    let means = blob_means(spec.k, spec.d, spec.class_separation);

    let mut train = (Vec::new(), Vec::new());
    let mut test = (Vec::new(), Vec::new());
    let mut seen = vec![0usize; spec.k];

    for i in 0..spec.n {
        let label = i % spec.k;
        let j = seen[label];
        seen[label] += 1;
        let noise = |rng: &mut rng::Rng| -> f64 {
            let z: f64 = StandardNormal.sample(rng);
            spec.noise_std * z
        };
        let x: Vec<f64> = match spec.generator {
            Generator::GaussianBlobs => means[label].iter().map(|m| m + noise(&mut rng)).collect(),
            Generator::Spirals => {
                let t = (j as f64 + 0.5) / per_class as f64;
                let radius = spec.class_separation * t;
                let angle = 2.0 * std::f64::consts::PI * label as f64 / spec.k as f64 + 4.0 * t;
                vec![
                    radius * angle.cos() + noise(&mut rng),
                    radius * angle.sin() + noise(&mut rng),
                ]
            }
        };
        let dest = if j % 5 == 4 { &mut test } else { &mut train };
        dest.0.push(x);
        dest.1.push(label);
    }

    // below five samples per class the round-robin leaves the test split
    // empty; move the last training sample over
    if test.0.is_empty() {
        test.0.extend(train.0.pop());
        test.1.extend(train.1.pop());
    }
    Ok((
        Dataset::new(train.0, train.1, spec.k)?,
        Dataset::new(test.0, test.1, spec.k)?,
    ))
}

fn parse_row(record: &csv::StringRecord) -> Option<Vec<f64>> {
    record.iter().map(|f| f.trim().parse::<f64>().ok()).collect()
}

/// Read `f1,...,fD,label` rows. A first row that does not parse as numbers
/// is treated as a header. `K` is inferred as `max(label) + 1`.
pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let text = fs::read_to_string(path)?;
    parse_csv(&text)
}

pub fn parse_csv(text: &str) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(text.as_bytes());

    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut width: Option<usize> = None;

    for (idx, record) in reader.records().enumerate() {
        let row = idx + 1;
        let record = record.map_err(|e| Error::Parse {
            row,
            message: e.to_string(),
        })?;
        if record.iter().all(|f| f.trim().is_empty()) {
            continue;
        }
        if idx == 0 && parse_row(&record).is_none() {
            continue;
        }
        if record.len() < 2 {
            return Err(Error::Parse {
                row,
                message: "need at least one feature and a label".into(),
            });
        }
        let w = *width.get_or_insert(record.len());
        if record.len() != w {
            return Err(Error::Parse {
                row,
                message: format!("expected {} columns, found {}", w, record.len()),
            });
        }
        let mut x = Vec::with_capacity(w - 1);
        for (col, field) in record.iter().take(w - 1).enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| Error::Parse {
                row,
                message: format!("column {} is not numeric: {field:?}", col + 1),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row,
                    message: format!("column {} is not finite", col + 1),
                });
            }
            x.push(v);
        }
        let raw = record[w - 1].trim();
        let label: i64 = raw.parse().map_err(|_| Error::Parse {
            row,
            message: format!("label is not an integer: {raw:?}"),
        })?;
        if label < 0 {
            return Err(Error::Parse {
                row,
                message: format!("negative label {label}"),
            });
        }
        features.push(x);
        labels.push(label as usize);
    }

    if labels.is_empty() {
        return Err(Error::Parse {
            row: 0,
            message: "no data rows".into(),
        });
    }
    let k = labels.iter().max().copied().unwrap_or(0) + 1;
    Dataset::new(features, labels, k)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs(noise: f64) -> DataSpec {
        DataSpec {
            generator: Generator::GaussianBlobs,
            k: 4,
            d: 3,
            n: 103,
            class_separation: 2.0,
            noise_std: noise,
            seed: 9,
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&blobs(0.5)).unwrap();
        let b = generate(&blobs(0.5)).unwrap();
        assert_eq!(a, b);
        let c = generate(&DataSpec { seed: 10, ..blobs(0.5) }).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn noise_free_blobs_sit_on_means() {
        let spec = blobs(0.0);
        let means = blob_means(spec.k, spec.d, spec.class_separation);
        let (train, test) = generate(&spec).unwrap();
        for ds in [&train, &test] {
            let mut correct = 0;
            for (x, &y) in ds.features().iter().zip(ds.labels()) {
                assert_eq!(x, &means[y]);
                let nearest = (0..spec.k)
                    .min_by(|&a, &b| {
                        let da: f64 = x.iter().zip(&means[a]).map(|(p, q)| (p - q).powi(2)).sum();
                        let db: f64 = x.iter().zip(&means[b]).map(|(p, q)| (p - q).powi(2)).sum();
                        da.total_cmp(&db)
                    })
                    .unwrap();
                correct += usize::from(nearest == y);
            }
            assert_eq!(correct, ds.len());
        }
    }

    #[test]
    fn means_are_at_separation_distance() {
        for (k, d) in [(3, 5), (6, 2), (3, 1)] {
            let m = blob_means(k, d, 3.0);
            let distinct = m.windows(2).all(|w| w[0] != w[1]);
            assert!(distinct);
            if d >= 2 {
                for v in &m {
                    let r: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                    assert!((r - 3.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn stratified_split_counts() {
        for n in [10usize, 57, 103, 2000] {
            let spec = DataSpec { n, ..blobs(1.0) };
            let (train, test) = generate(&spec).unwrap();
            assert_eq!(train.len() + test.len(), n);
            let all = {
                let mut c = vec![0; spec.k];
                for i in 0..n {
                    c[i % spec.k] += 1;
                }
                c
            };
            for (c, (tr, te)) in all.iter().zip(train.class_counts().iter().zip(test.class_counts())) {
                let ideal = *c as f64 * 0.2;
                assert!((te as f64 - ideal).abs() <= 1.0, "n={n}: {te} vs {ideal}");
                assert_eq!(tr + te, *c);
            }
        }
    }

    #[test]
    fn spirals_need_two_dims() {
        let spec = DataSpec {
            generator: Generator::Spirals,
            d: 3,
            ..blobs(0.1)
        };
        assert!(matches!(generate(&spec), Err(Error::InvalidSpec(_))));
        let ok = DataSpec { d: 2, ..spec };
        let (train, _) = generate(&ok).unwrap();
        assert_eq!(train.dim(), 2);
    }

    #[test]
    fn spec_validation() {
        assert!(DataSpec { k: 1, ..blobs(1.0) }.validate().is_err());
        assert!(DataSpec { n: 3, ..blobs(1.0) }.validate().is_err());
        assert!(DataSpec { class_separation: 0.0, ..blobs(1.0) }.validate().is_err());
        assert!(DataSpec { noise_std: -1.0, ..blobs(1.0) }.validate().is_err());
    }

    #[test]
    fn csv_basic_and_header() {
        let ds = parse_csv("1,2,0\n3,4,1\n5,6,2\n").unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.dim(), 2);
        assert_eq!(ds.num_classes(), 3);

        let ds = parse_csv("f1,f2,label\r\n1,2,0\r\n3,4,1\r\n").unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.features()[1], vec![3.0, 4.0]);
    }

    #[test]
    fn csv_errors_name_the_row() {
        match parse_csv("1,2,0\n3,1\n") {
            Err(Error::Parse { row: 2, .. }) => {}
            other => panic!("{other:?}"),
        }
        match parse_csv("1,2,0\n3,x,1\n") {
            Err(Error::Parse { row: 2, message }) => assert!(message.contains("column 2")),
            other => panic!("{other:?}"),
        }
        match parse_csv("1,2,0\n3,4,-1\n") {
            Err(Error::Parse { row: 2, message }) => assert!(message.contains("negative")),
            other => panic!("{other:?}"),
        }
        assert!(parse_csv("").is_err());
    }
}
