//! Synthetic in/out-distribution data and CSV ingestion.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numerics::norm;
use crate::scoring::{format_float, format_label, parse_float, parse_label};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dist {
    In,
    Out,
}

impl fmt::Display for Dist {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Dist::In => "in",
            Dist::Out => "out",
        })
    }
}

impl FromStr for Dist {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "in" => Ok(Dist::In),
            "out" => Ok(Dist::Out),
            _ => Err(Error::Argument(format!("unknown dist '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(Error::Argument(format!("unknown split '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OodKind {
    /// Uniform on a shell strictly outside every class cluster.
    Ring,
    /// Gaussian blobs at the class centers rotated half a step around the origin.
    Shifted,
    /// Uniform over a box twice the size of the in-distribution support.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub input_dim: usize,
    pub center_radius: f64,
    pub in_std: f64,
    pub train_ood_kind: OodKind,
    pub test_ood_kind: OodKind,
    /// Outer radius of the ring; defaults to twice the in-support radius.
    pub ring_outer_radius: Option<f64>,
    pub n_train_in: usize,
    pub n_train_out: usize,
    pub n_test_in: usize,
    pub n_test_out: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 4,
            input_dim: 2,
            center_radius: 4.0,
            in_std: 0.5,
            train_ood_kind: OodKind::Uniform,
            test_ood_kind: OodKind::Ring,
            ring_outer_radius: None,
            n_train_in: 4000,
            n_train_out: 8000,
            n_test_in: 1000,
            n_test_out: 1000,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    /// Radius that contains every class's 3σ ball.
    pub fn in_support_radius(&self) -> f64 {
        self.center_radius + 3.0 * self.in_std
    }

    pub fn ring_radii(&self) -> (f64, f64) {
        let inner = self.center_radius + 4.0 * self.in_std;
        let outer = self.ring_outer_radius.unwrap_or(2.0 * self.in_support_radius());
        (inner, outer)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Spec("num_classes must be at least 2".into()));
        }
        if self.input_dim < 2 {
            return Err(Error::Spec("input_dim must be at least 2".into()));
        }
        if !(self.in_std.is_finite() && self.in_std > 0.0) {
            return Err(Error::Spec("in_std must be positive".into()));
        }
        if !(self.center_radius.is_finite() && self.center_radius > 0.0) {
            return Err(Error::Spec("center_radius must be positive".into()));
        }
        if [self.n_train_in, self.n_train_out, self.n_test_in, self.n_test_out].contains(&0) {
            return Err(Error::Spec("all sample counts must be positive".into()));
        }
        let uses_ring = self.train_ood_kind == OodKind::Ring || self.test_ood_kind == OodKind::Ring;
        let (inner, outer) = self.ring_radii();
        if uses_ring && !(inner < outer) {
            return Err(Error::Spec(format!(
                "ring inner radius {inner} is not below outer radius {outer}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: usize,
    pub features: Vec<f64>,
    /// `None` marks an out-of-distribution sample.
    pub label: Option<usize>,
    pub split: Split,
    pub dist: Dist,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub num_classes: usize,
    pub input_dim: usize,
}

impl Dataset {
    pub fn select(&self, split: Split, dist: Dist) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(move |s| s.split == split && s.dist == dist)
    }

    pub fn count(&self, split: Split, dist: Dist) -> usize {
        self.select(split, dist).count()
    }
}

/// K maximally spread unit vectors in `dim` dimensions.
///
/// A regular simplex when `K ≤ dim + 1`, a randomly rotated cross-polytope
/// (±e_i) when `K ≤ 2·dim`, and seeded random directions beyond that.
pub fn unit_centers(k: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    if k <= dim + 1 {
        return simplex(k, dim);
    }
    if k <= 2 * dim {
        let q = random_orthogonal(dim, rng);
        return (0..k)
            .map(|i| {
                let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
                q[i / 2].iter().map(|v| sign * v).collect()
            })
            .collect();
    }
    (0..k)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
            let n = norm(&v);
            v.into_iter().map(|x| x / n).collect()
        })
        .collect()
}

fn simplex(k: usize, dim: usize) -> Vec<Vec<f64>> {
    // vertices e_1..e_n and c·1 in R^n, n = k − 1, centered then normalized
    let n = k - 1;
    let c = (1.0 - (k as f64).sqrt()) / n as f64;
    let mut pts: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    pts.push(vec![c; n]);
    let centroid: Vec<f64> = (0..n).map(|j| pts.iter().map(|p| p[j]).sum::<f64>() / k as f64).collect();
    pts.into_iter()
        .map(|p| {
            let centered: Vec<f64> = p.iter().zip(&centroid).map(|(a, b)| a - b).collect();
            let r = norm(&centered);
            let mut out: Vec<f64> = centered.into_iter().map(|x| x / r).collect();
            out.resize(dim, 0.0);
            out
        })
        .collect()
}

fn random_orthogonal(dim: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(dim);
    while basis.len() < dim {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        for b in &basis {
            let proj = crate::numerics::dot(&v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= proj * y);
        }
        let n = norm(&v);
        if n > 1e-8 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    basis
}

fn gaussian_around(center: &[f64], std: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    center
        .iter()
        .map(|c| {
            let z: f64 = StandardNormal.sample(rng);
            c + std * z
        })
        .collect()
}

fn ood_sample(
    kind: OodKind,
    spec: &SyntheticSpec,
    shifted_centers: &[Vec<f64>],
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let d = spec.input_dim;
    match kind {
        OodKind::Ring => {
            let (inner, outer) = spec.ring_radii();
            let dir: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
            let n = norm(&dir);
            // uniform in shell volume
            let df = d as f64;
            let u: f64 = rng.random_range(inner.powf(df)..outer.powf(df));
            let r = u.powf(1.0 / df).clamp(inner.next_up(), outer);
            dir.into_iter().map(|x| r * x / n).collect()
        }
        OodKind::Shifted => {
            let c = &shifted_centers[rng.random_range(0..shifted_centers.len())];
            gaussian_around(c, spec.in_std, rng)
        }
        OodKind::Uniform => {
            let half = 2.0 * spec.in_support_radius();
            (0..d).map(|_| rng.random_range(-half..half)).collect()
        }
    }
}

pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let k = spec.num_classes;
    let centers: Vec<Vec<f64>> = unit_centers(k, spec.input_dim, &mut rng)
        .into_iter()
        .map(|c| c.into_iter().map(|x| x * spec.center_radius).collect())
        .collect();
    let angle = std::f64::consts::PI / k as f64;
    let (sin, cos) = angle.sin_cos();
    let shifted: Vec<Vec<f64>> = centers
        .iter()
        .map(|c| {
            let mut r = c.clone();
            r[0] = cos * c[0] - sin * c[1];
            r[1] = sin * c[0] + cos * c[1];
            r
        })
        .collect();

    let mut samples = Vec::new();
    let mut next_id = 0;
    let mut push = |features, label, split, dist, samples: &mut Vec<Sample>| {
        samples.push(Sample { id: next_id, features, label, split, dist });
        next_id += 1;
    };
    for (split, n_in, n_out, kind) in [
        (Split::Train, spec.n_train_in, spec.n_train_out, spec.train_ood_kind),
        (Split::Test, spec.n_test_in, spec.n_test_out, spec.test_ood_kind),
    ] {
        for i in 0..n_in {
            let class = i % k;
            let x = gaussian_around(&centers[class], spec.in_std, &mut rng);
            push(x, Some(class), split, Dist::In, &mut samples);
        }
        for _ in 0..n_out {
            let x = ood_sample(kind, spec, &shifted, &mut rng);
            push(x, None, split, Dist::Out, &mut samples);
        }
    }
    Ok(Dataset { samples, num_classes: k, input_dim: spec.input_dim })
}

pub fn write_dataset_csv<W: Write>(mut w: W, ds: &Dataset) -> Result<()> {
    let mut out = String::from("id,split,dist,label");
    for j in 0..ds.input_dim {
        out.push_str(&format!(",x{j}"));
    }
    out.push('\n');
    for s in &ds.samples {
        out.push_str(&format!("{},{},{},{}", s.id, s.split, s.dist, format_label(s.label)));
        for x in &s.features {
            out.push(',');
            out.push_str(&format_float(*x));
        }
        out.push('\n');
    }
    w.write_all(out.as_bytes())?;
    Ok(())
}

/// Reads a dataset CSV. `num_classes` is one more than the largest label seen.
pub fn read_dataset_csv<R: Read>(r: R) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(r);
    let header = reader.headers()?.clone();
    let dim = feature_columns(&header, &["id", "split", "dist", "label"], 'x')?;
    let mut samples = Vec::new();
    let mut max_label = None::<usize>;
    for rec in reader.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != 4 + dim {
            return Err(Error::Format {
                line,
                message: format!("expected {} columns, got {}", 4 + dim, rec.len()),
            });
        }
        let id = rec[0].parse().map_err(|_| Error::Parse { line, message: format!("bad id '{}'", &rec[0]) })?;
        let split: Split = rec[1].parse().map_err(|e: Error| Error::Parse { line, message: e.to_string() })?;
        let dist: Dist = rec[2].parse().map_err(|e: Error| Error::Parse { line, message: e.to_string() })?;
        let label = parse_label(&rec[3], line)?;
        check_label_dist(label, dist, line)?;
        if let Some(l) = label {
            max_label = Some(max_label.map_or(l, |m| m.max(l)));
        }
        let features = (4..4 + dim).map(|j| parse_float(&rec[j], line)).collect::<Result<_>>()?;
        samples.push(Sample { id, features, label, split, dist });
    }
    Ok(Dataset { samples, num_classes: max_label.map_or(0, |m| m + 1), input_dim: dim })
}

fn check_label_dist(label: Option<usize>, dist: Dist, line: u64) -> Result<()> {
    match (dist, label) {
        (Dist::In, None) => Err(Error::Format { line, message: "in-distribution row without a label".into() }),
        (Dist::Out, Some(_)) => Err(Error::Format { line, message: "out-of-distribution row with a label".into() }),
        _ => Ok(()),
    }
}

/// Validates the fixed leading columns and counts `{prefix}0, {prefix}1, …`.
fn feature_columns(header: &csv::StringRecord, fixed: &[&str], prefix: char) -> Result<usize> {
    if header.len() < fixed.len() || header.iter().zip(fixed).any(|(a, b)| a != *b) {
        return Err(Error::Format { line: 1, message: format!("header must start with {}", fixed.join(",")) });
    }
    for (j, name) in header.iter().skip(fixed.len()).enumerate() {
        if name != format!("{prefix}{j}") {
            return Err(Error::Format { line: 1, message: format!("unexpected column '{name}'") });
        }
    }
    Ok(header.len() - fixed.len())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogitRow {
    pub id: String,
    pub dist: Dist,
    pub label: Option<usize>,
    pub logits: Vec<f64>,
}

pub fn write_logit_csv<W: Write>(mut w: W, rows: &[LogitRow], num_classes: usize) -> Result<()> {
    let mut out = String::from("id,dist,label");
    for j in 0..num_classes {
        out.push_str(&format!(",z{j}"));
    }
    out.push('\n');
    for r in rows {
        if r.logits.len() != num_classes {
            return Err(Error::Dimension { expected: num_classes, got: r.logits.len() });
        }
        out.push_str(&format!("{},{},{}", r.id, r.dist, format_label(r.label)));
        for z in &r.logits {
            out.push(',');
            out.push_str(&format_float(*z));
        }
        out.push('\n');
    }
    w.write_all(out.as_bytes())?;
    Ok(())
}

/// Parses a logit CSV; returns the rows and the logit dimension from the header.
pub fn read_logit_csv<R: Read>(r: R) -> Result<(Vec<LogitRow>, usize)> {
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(r);
    let header = reader.headers()?.clone();
    let k = feature_columns(&header, &["id", "dist", "label"], 'z')?;
    if k == 0 {
        return Err(Error::Format { line: 1, message: "no logit columns".into() });
    }
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != 3 + k {
            return Err(Error::Format {
                line,
                message: format!("expected {k} logit columns, got {}", rec.len().saturating_sub(3)),
            });
        }
        let dist: Dist = rec[1].parse().map_err(|e: Error| Error::Parse { line, message: e.to_string() })?;
        let label = parse_label(&rec[2], line)?;
        check_label_dist(label, dist, line)?;
        if let Some(l) = label {
            if l >= k {
                return Err(Error::Format { line, message: format!("label {l} out of range for {k} logits") });
            }
        }
        let logits = (3..3 + k).map(|j| parse_float(&rec[j], line)).collect::<Result<_>>()?;
        rows.push(LogitRow { id: rec[0].to_string(), dist, label, logits });
    }
    Ok((rows, k))
}

pub fn load_logit_csv(path: &Path) -> Result<(Vec<LogitRow>, usize)> {
    read_logit_csv(std::fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small_spec() -> SyntheticSpec {
        SyntheticSpec {
            n_train_in: 40,
            n_train_out: 30,
            n_test_in: 100,
            n_test_out: 60,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn balanced_and_counted() {
        let spec = SyntheticSpec { num_classes: 2, ..small_spec() };
        let ds = generate(&spec).unwrap();
        let per: Vec<usize> = (0..2)
            .map(|c| ds.select(Split::Test, Dist::In).filter(|s| s.label == Some(c)).count())
            .collect();
        assert_eq!(per, vec![50, 50]);
        assert_eq!(ds.count(Split::Train, Dist::In), 40);
        assert_eq!(ds.count(Split::Train, Dist::Out), 30);
        assert_eq!(ds.count(Split::Test, Dist::Out), 60);
        assert!(ds.select(Split::Test, Dist::Out).all(|s| s.label.is_none()));
    }

    #[test]
    fn deterministic_per_seed() {
        assert_eq!(generate(&small_spec()).unwrap(), generate(&small_spec()).unwrap());
        let other = SyntheticSpec { seed: 1, ..small_spec() };
        assert_ne!(generate(&small_spec()).unwrap(), generate(&other).unwrap());
    }

    #[test]
    fn ring_samples_stay_outside_clusters() {
        for (k, d) in [(4, 2), (3, 2), (5, 3), (9, 3)] {
            let spec = SyntheticSpec { num_classes: k, input_dim: d, n_test_out: 2000, ..small_spec() };
            let ds = generate(&spec).unwrap();
            let (inner, _) = spec.ring_radii();
            let centers: Vec<Vec<f64>> = {
                let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
                unit_centers(k, d, &mut rng)
                    .into_iter()
                    .map(|c| c.into_iter().map(|x| x * spec.center_radius).collect())
                    .collect()
            };
            for s in ds.select(Split::Test, Dist::Out) {
                assert!(norm(&s.features) > inner);
                for c in &centers {
                    let dist = crate::numerics::squared_distance(&s.features, c).sqrt();
                    assert!(dist > 3.0 * spec.in_std);
                }
            }
        }
    }

    #[test]
    fn simplex_centers_are_equidistant() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = unit_centers(4, 3, &mut rng);
        let d01 = crate::numerics::squared_distance(&c[0], &c[1]);
        for i in 0..4 {
            assert!((norm(&c[i]) - 1.0).abs() < 1e-12);
            for j in (i + 1)..4 {
                assert!((crate::numerics::squared_distance(&c[i], &c[j]) - d01).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn infeasible_ring_is_rejected() {
        let spec = SyntheticSpec { ring_outer_radius: Some(5.0), ..small_spec() };
        assert!(matches!(generate(&spec), Err(Error::Spec(_))));
        let spec = SyntheticSpec { in_std: 0.0, ..small_spec() };
        assert!(generate(&spec).is_err());
    }

    #[test]
    fn uniform_and_shifted_kinds() {
        let spec = SyntheticSpec { train_ood_kind: OodKind::Uniform, test_ood_kind: OodKind::Shifted, ..small_spec() };
        let ds = generate(&spec).unwrap();
        let half = 2.0 * spec.in_support_radius();
        assert!(ds.select(Split::Train, Dist::Out).all(|s| s.features.iter().all(|x| x.abs() <= half)));
        assert_eq!(ds.count(Split::Test, Dist::Out), 60);
    }

    #[test]
    fn dataset_csv_roundtrip() {
        let ds = generate(&small_spec()).unwrap();
        let mut buf = Vec::new();
        write_dataset_csv(&mut buf, &ds).unwrap();
        let back = read_dataset_csv(buf.as_slice()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn logit_csv_edge_cases() {
        let (rows, k) = read_logit_csv("id,dist,label,z0,z1,z2\n".as_bytes()).unwrap();
        assert!(rows.is_empty());
        assert_eq!(k, 3);
        let bad = "id,dist,label,z0,z1,z2\na,in,0,1,2,3\nb,out,-,1,2\n";
        match read_logit_csv(bad.as_bytes()) {
            Err(Error::Format { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected format error, got {other:?}"),
        }
        let bad = "id,dist,label,z0,z1\na,in,zero,1,2\n";
        assert!(matches!(read_logit_csv(bad.as_bytes()), Err(Error::Parse { line: 2, .. })));
        assert!(read_logit_csv("id,label,dist,z0\n".as_bytes()).is_err());
    }

    proptest! {
        #[test]
        fn logit_csv_roundtrips_bitwise(
            raw in prop::collection::vec((prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 3), prop::option::of(0usize..3)), 0..20)
        ) {
            let rows: Vec<LogitRow> = raw
                .into_iter()
                .enumerate()
                .map(|(i, (logits, label))| LogitRow {
                    id: format!("s{i}"),
                    dist: if label.is_some() { Dist::In } else { Dist::Out },
                    label,
                    logits,
                })
                .collect();
            let mut buf = Vec::new();
            write_logit_csv(&mut buf, &rows, 3).unwrap();
            let (back, k) = read_logit_csv(buf.as_slice()).unwrap();
            prop_assert_eq!(k, 3);
            for (a, b) in rows.iter().zip(&back) {
                prop_assert_eq!(&a.id, &b.id);
                prop_assert_eq!(a.label, b.label);
                for (x, y) in a.logits.iter().zip(&b.logits) {
                    prop_assert_eq!(x.to_bits(), y.to_bits());
                }
            }
        }
    }
}
