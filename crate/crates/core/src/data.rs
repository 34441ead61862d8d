//! Synthetic data, table I/O, and the three heterogeneity constructions:
//! per-client long-tail label skew, per-domain affine feature shift, and the
//! global, persistent label remapping process.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::seed;

/// Spherical unit-variance Gaussian per class, means on a sphere of radius 3.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    num_classes: usize,
    dim: usize,
    means: Vec<f64>,
}

pub const MEAN_RADIUS: f64 = 3.0;

impl GaussianMixture {
    pub fn new(num_classes: usize, dim: usize, seed: u64) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::invalid("classes", "need at least 2 classes"));
        }
        if dim < 2 {
            return Err(Error::invalid("dim", "need at least 2 feature dimensions"));
        }
        let mut rng = seed::rng(&[seed::tag::MIXTURE, seed]);
        let mut means = Vec::with_capacity(num_classes * dim);
        for _ in 0..num_classes {
            let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            means.extend(v.iter().map(|x| MEAN_RADIUS * x / norm));
        }
        Ok(Self {
            num_classes,
            dim,
            means,
        })
    }

    pub fn mean(&self, class: usize) -> &[f64] {
        &self.means[class * self.dim..(class + 1) * self.dim]
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `n_per_class` samples of every class, class-major order.
    pub fn sample(&self, n_per_class: usize, seed: u64) -> Dataset {
        let mut rng = seed::rng(&[seed::tag::TRAIN, seed]);
        let n = n_per_class * self.num_classes;
        let mut features = Vec::with_capacity(n * self.dim);
        let mut labels = Vec::with_capacity(n);
        for c in 0..self.num_classes {
            for _ in 0..n_per_class {
                for &m in self.mean(c) {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    features.push(m + z);
                }
                labels.push(c);
            }
        }
        Dataset::new(self.dim, self.num_classes, features, labels)
            .expect("consistent by construction")
    }

    /// Accuracy of assigning each row to the nearest class mean.
    pub fn nearest_mean_accuracy(&self, data: &Dataset) -> f64 {
        let correct = (0..data.len())
            .filter(|&i| {
                let x = data.row(i);
                let best = (0..self.num_classes)
                    .map(|c| {
                        let d: f64 = x
                            .iter()
                            .zip(self.mean(c))
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum();
                        (c, d)
                    })
                    .fold(
                        (0, f64::INFINITY),
                        |acc, cur| if cur.1 < acc.1 { cur } else { acc },
                    );
                best.0 == data.labels()[i]
            })
            .count();
        correct as f64 / data.len().max(1) as f64
    }
}

pub fn gen_synthetic(
    num_classes: usize,
    dim: usize,
    n_per_class: usize,
    seed: u64,
) -> Result<Dataset> {
    Ok(GaussianMixture::new(num_classes, dim, seed)?.sample(n_per_class, seed))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ConceptShiftMode {
    /// One class considered per round with a single coin flip.
    #[default]
    Single,
    /// Every class flips independently.
    PerClass,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CovariateConfig {
    pub seed: u64,
    /// Standard deviation of the per-feature bias shift.
    pub bias_scale: f64,
}

impl Default for CovariateConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            bias_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShiftConfig {
    pub imbalance_ratio: f64,
    pub sample_fraction: f64,
    pub concept_shift_prob: f64,
    pub concept_shift_mode: ConceptShiftMode,
    pub covariate: CovariateConfig,
}

impl Default for ShiftConfig {
    fn default() -> Self {
        Self {
            imbalance_ratio: 0.01,
            sample_fraction: 0.1,
            concept_shift_prob: 0.0,
            concept_shift_mode: ConceptShiftMode::Single,
            covariate: CovariateConfig::default(),
        }
    }
}

impl ShiftConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.imbalance_ratio > 0.0 && self.imbalance_ratio <= 1.0) {
            return Err(Error::invalid("imbalance_ratio", "must lie in (0, 1]"));
        }
        if !(self.sample_fraction > 0.0 && self.sample_fraction <= 1.0) {
            return Err(Error::invalid("sample_fraction", "must lie in (0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.concept_shift_prob) {
            return Err(Error::invalid("concept_shift_prob", "must lie in [0, 1]"));
        }
        if !(self.covariate.bias_scale.is_finite() && self.covariate.bias_scale >= 0.0) {
            return Err(Error::invalid(
                "covariate_bias_scale",
                "must be finite and >= 0",
            ));
        }
        Ok(())
    }
}

/// Which constructions produced a client's shard.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ShiftMeta {
    pub client_id: Option<u64>,
    /// Classes ordered from most to least frequent.
    pub class_order: Option<Vec<usize>>,
    pub domain_id: Option<u64>,
    pub label_map_version: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset {
    pub data: Dataset,
    pub meta: ShiftMeta,
}

impl ClientDataset {
    pub fn plain(data: Dataset) -> Self {
        Self {
            data,
            meta: ShiftMeta::default(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Samples kept for the class at each rank: `max(1, floor(n_max * rho^(r/(C-1))))`.
pub fn long_tail_counts(n_max: usize, num_classes: usize, imbalance_ratio: f64) -> Vec<usize> {
    (0..num_classes)
        .map(|r| {
            let exponent = if num_classes > 1 {
                r as f64 / (num_classes - 1) as f64
            } else {
                0.0
            };
            ((n_max as f64 * imbalance_ratio.powf(exponent)).floor() as usize).max(1)
        })
        .collect()
}

/// Stratified subsample, then a client-specific long-tail trim.
pub fn partition_prior_shift(
    dataset: &Dataset,
    client_seed: u64,
    cfg: &ShiftConfig,
) -> Result<ClientDataset> {
    cfg.validate()?;
    let c = dataset.num_classes();
    let mut rng = seed::rng(&[seed::tag::PARTITION, client_seed]);

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); c];
    for (i, &l) in dataset.labels().iter().enumerate() {
        by_class[l].push(i);
    }
    let mut kept: Vec<Vec<usize>> = by_class
        .iter()
        .map(|idx| {
            if idx.is_empty() {
                return Vec::new();
            }
            let take =
                ((idx.len() as f64 * cfg.sample_fraction).floor() as usize).clamp(1, idx.len());
            let mut chosen: Vec<usize> = index::sample(&mut rng, idx.len(), take)
                .into_iter()
                .map(|j| idx[j])
                .collect();
            chosen.sort_unstable();
            chosen
        })
        .collect();
    let n_max = kept.iter().map(Vec::len).max().unwrap_or(0);

    let mut order: Vec<usize> = (0..c).collect();
    order.shuffle(&mut rng);
    let counts = long_tail_counts(n_max, c, cfg.imbalance_ratio);
    for (rank, &class) in order.iter().enumerate() {
        kept[class].truncate(counts[rank]);
    }
    let mut indices: Vec<usize> = kept.into_iter().flatten().collect();
    indices.sort_unstable();
    Ok(ClientDataset {
        data: dataset.select(&indices),
        meta: ShiftMeta {
            class_order: Some(order),
            ..Default::default()
        },
    })
}

/// Invertible affine map `x -> scale * (R x) + bias`, with `R` a rotation in
/// one coordinate plane.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariateTransform {
    pub plane: (usize, usize),
    pub angle: f64,
    pub scale: Vec<f64>,
    pub bias: Vec<f64>,
}

impl CovariateTransform {
    pub fn identity(dim: usize) -> Self {
        Self {
            plane: (0, 1.min(dim.saturating_sub(1))),
            angle: 0.0,
            scale: vec![1.0; dim],
            bias: vec![0.0; dim],
        }
    }

    /// Domain 0 is the identity; every other domain draws its parameters
    /// from a stream keyed by `(cfg.seed, domain_id)`.
    pub fn for_domain(domain_id: u64, dim: usize, cfg: &CovariateConfig) -> Self {
        if domain_id == 0 || dim < 2 {
            return Self::identity(dim);
        }
        let mut rng = seed::rng(&[seed::tag::DOMAIN, cfg.seed, domain_id]);
        let first = rng.random_range(0..dim);
        let mut second = rng.random_range(0..dim - 1);
        if second >= first {
            second += 1;
        }
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        let log_scale = Uniform::new_inclusive(0.5f64.ln(), 2f64.ln()).expect("valid range");
        let scale = (0..dim).map(|_| log_scale.sample(&mut rng).exp()).collect();
        let bias = (0..dim)
            .map(|_| cfg.bias_scale * Distribution::<f64>::sample(&StandardNormal, &mut rng))
            .collect();
        Self {
            plane: (first, second),
            angle,
            scale,
            bias,
        }
    }

    fn rotate(&self, x: &mut [f64], angle: f64) {
        let (i, j) = self.plane;
        if i == j {
            return;
        }
        let (s, c) = angle.sin_cos();
        let (a, b) = (x[i], x[j]);
        x[i] = c * a - s * b;
        x[j] = s * a + c * b;
    }

    pub fn apply(&self, x: &mut [f64]) {
        self.rotate(x, self.angle);
        for ((v, s), b) in x.iter_mut().zip(&self.scale).zip(&self.bias) {
            *v = s * *v + b;
        }
    }

    pub fn invert(&self, x: &mut [f64]) {
        for ((v, s), b) in x.iter_mut().zip(&self.scale).zip(&self.bias) {
            *v = (*v - b) / s;
        }
        self.rotate(x, -self.angle);
    }
}

pub fn apply_covariate_shift(
    dataset: &Dataset,
    domain_id: u64,
    cfg: &ShiftConfig,
) -> ClientDataset {
    let transform = CovariateTransform::for_domain(domain_id, dataset.dim(), &cfg.covariate);
    let mut data = dataset.clone();
    let dim = data.dim();
    if domain_id != 0 {
        for row in data.features_mut().chunks_mut(dim) {
            transform.apply(row);
        }
    }
    ClientDataset {
        data,
        meta: ShiftMeta {
            domain_id: Some(domain_id),
            ..Default::default()
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Remap {
    pub round: usize,
    /// Original class id whose label changed.
    pub source: usize,
    /// Its new label.
    pub target: usize,
}

/// Global, persistent label remapping. `history` is the source of truth;
/// `current` caches its replay.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    num_classes: usize,
    current: Vec<usize>,
    history: Vec<Remap>,
}

impl LabelMap {
    pub fn identity(num_classes: usize) -> Self {
        Self {
            num_classes,
            current: (0..num_classes).collect(),
            history: Vec::new(),
        }
    }

    pub fn version(&self) -> u64 {
        self.history.len() as u64
    }

    pub fn history(&self) -> &[Remap] {
        &self.history
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn apply(&self, class: usize) -> usize {
        self.current[class]
    }

    pub fn current(&self) -> &[usize] {
        &self.current
    }

    /// Mapping after the first `version` remaps, replayed from history.
    pub fn mapping_at(&self, version: u64) -> Vec<usize> {
        let mut map: Vec<usize> = (0..self.num_classes).collect();
        for r in self.history.iter().take(version as usize) {
            map[r.source] = r.target;
        }
        map
    }

    fn remap(&mut self, round: usize, source: usize, rng: &mut impl Rng) {
        let old = self.current[source];
        let mut target = rng.random_range(0..self.num_classes - 1);
        if target >= old {
            target += 1;
        }
        self.current[source] = target;
        self.history.push(Remap {
            round,
            source,
            target,
        });
    }
}

/// Advances the label process by one round. `force` guarantees at least one
/// remap this round regardless of the coins.
pub fn concept_shift_step(
    label_map: &LabelMap,
    round: usize,
    prob: f64,
    mode: ConceptShiftMode,
    force: bool,
    rng: &mut impl Rng,
) -> LabelMap {
    let mut next = label_map.clone();
    let c = next.num_classes;
    if c < 2 {
        return next;
    }
    match mode {
        ConceptShiftMode::Single => {
            let coin: f64 = rng.random();
            if force || coin < prob {
                let source = rng.random_range(0..c);
                next.remap(round, source, rng);
            }
        }
        ConceptShiftMode::PerClass => {
            let mut any = false;
            for source in 0..c {
                let coin: f64 = rng.random();
                if coin < prob {
                    next.remap(round, source, rng);
                    any = true;
                }
            }
            if force && !any {
                let source = rng.random_range(0..c);
                next.remap(round, source, rng);
            }
        }
    }
    next
}

/// Reads a comma-separated table with header `f0,...,f{dim-1},label`.
pub fn load_table(path: impl AsRef<Path>, num_classes: usize) -> Result<Dataset> {
    let path = path.as_ref();
    let parse_err = |line: u64, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(file);
    let header = reader
        .headers()
        .map_err(|e| parse_err(1, e.to_string()))?
        .clone();
    let cols = header.len();
    if cols < 2 {
        return Err(parse_err(
            1,
            "header needs at least one feature and a label".into(),
        ));
    }
    let dim = cols - 1;
    for (i, name) in header.iter().enumerate() {
        let expected = if i == dim {
            "label".to_string()
        } else {
            format!("f{i}")
        };
        if name != expected {
            return Err(parse_err(
                1,
                format!("column {i} is `{name}`, expected `{expected}`"),
            ));
        }
    }

    let mut features = Vec::new();
    let mut labels = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != cols {
            return Err(parse_err(
                line,
                format!("expected {cols} fields, found {}", record.len()),
            ));
        }
        for (i, cell) in record.iter().take(dim).enumerate() {
            let v: f64 = cell
                .trim()
                .parse()
                .map_err(|_| parse_err(line, format!("feature f{i}: `{cell}` is not a number")))?;
            if !v.is_finite() {
                return Err(parse_err(line, format!("feature f{i} is not finite")));
            }
            features.push(v);
        }
        let cell = record.get(dim).expect("length checked").trim();
        let label: usize = cell.parse().map_err(|_| {
            parse_err(
                line,
                format!("label `{cell}` is not a non-negative integer"),
            )
        })?;
        if label >= num_classes {
            return Err(parse_err(
                line,
                format!("label {label} out of range for {num_classes} classes"),
            ));
        }
        labels.push(label);
    }
    Dataset::new(dim, num_classes, features, labels)
}

pub fn write_table(path: impl AsRef<Path>, data: &Dataset) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    let header: Vec<String> = (0..data.dim())
        .map(|i| format!("f{i}"))
        .chain(["label".into()])
        .collect();
    writeln!(w, "{}", header.join(",")).map_err(io)?;
    for i in 0..data.len() {
        let row: Vec<String> = data.row(i).iter().map(|v| format!("{v:?}")).collect();
        writeln!(w, "{},{}", row.join(","), data.labels()[i]).map_err(io)?;
    }
    w.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn synthetic_is_deterministic_and_balanced() {
        let a = gen_synthetic(4, 3, 25, 7).unwrap();
        assert_eq!(a, gen_synthetic(4, 3, 25, 7).unwrap());
        assert_ne!(a, gen_synthetic(4, 3, 25, 8).unwrap());
        assert_eq!(a.class_counts(), vec![25; 4]);
        assert!(gen_synthetic(1, 3, 5, 0).is_err());
        assert!(gen_synthetic(3, 1, 5, 0).is_err());
        let m = GaussianMixture::new(5, 4, 1).unwrap();
        for c in 0..5 {
            let r = m.mean(c).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((r - MEAN_RADIUS).abs() < 1e-12);
        }
    }

    #[test]
    fn two_class_mixture_is_separable() {
        let m = GaussianMixture::new(2, 8, 3).unwrap();
        let data = m.sample(500, 3);
        assert!(m.nearest_mean_accuracy(&data) > 0.95);
    }

    #[test]
    fn profile_endpoints() {
        let counts = long_tail_counts(100, 10, 0.01);
        assert_eq!(counts[0], 100);
        assert_eq!(counts[9], 1);
        assert_eq!(long_tail_counts(40, 5, 1.0), vec![40; 5]);
    }

    #[test]
    fn balanced_ratio_keeps_subsample() {
        let data = gen_synthetic(5, 2, 100, 0).unwrap();
        let cfg = ShiftConfig {
            imbalance_ratio: 1.0,
            ..Default::default()
        };
        let shard = partition_prior_shift(&data, 3, &cfg).unwrap();
        assert_eq!(shard.data.class_counts(), vec![10; 5]);
    }

    #[test]
    fn shard_counts_follow_profile() {
        let data = gen_synthetic(10, 3, 200, 1).unwrap();
        let cfg = ShiftConfig::default();
        let mut orders = std::collections::HashSet::new();
        for client in 0..20 {
            let shard = partition_prior_shift(&data, client, &cfg).unwrap();
            let order = shard.meta.class_order.clone().unwrap();
            let counts = shard.data.class_counts();
            for (r, &class) in order.iter().enumerate() {
                let expected = ((20.0 * 0.01f64.powf(r as f64 / 9.0)).floor() as usize).max(1);
                assert_eq!(counts[class], expected);
            }
            orders.insert(order);
        }
        assert!(orders.len() >= 2);
    }

    #[test]
    fn covariate_identity_and_inverse() {
        let data = gen_synthetic(3, 6, 20, 2).unwrap();
        let cfg = ShiftConfig::default();
        assert_eq!(apply_covariate_shift(&data, 0, &cfg).data, data);

        let a = CovariateTransform::for_domain(3, 6, &cfg.covariate);
        assert_eq!(a, CovariateTransform::for_domain(3, 6, &cfg.covariate));
        assert!(a.scale.iter().all(|&s| (0.5..=2.0).contains(&s)));

        let shifted = apply_covariate_shift(&data, 3, &cfg);
        assert_eq!(shifted.data.labels(), data.labels());
        assert_ne!(shifted.data.features(), data.features());
        for i in 0..data.len() {
            let mut x = shifted.data.row(i).to_vec();
            a.invert(&mut x);
            for (u, v) in x.iter().zip(data.row(i)) {
                assert!((u - v).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn concept_shift_basics() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut map = LabelMap::identity(5);
        for round in 1..=500 {
            map = concept_shift_step(&map, round, 0.0, ConceptShiftMode::Single, false, &mut rng);
        }
        assert_eq!(map, LabelMap::identity(5));

        let mut map = LabelMap::identity(5);
        for round in 1..=200 {
            let before = map.current().to_vec();
            map = concept_shift_step(&map, round, 0.3, ConceptShiftMode::Single, false, &mut rng);
            if let Some(last) = map.history().last().filter(|r| r.round == round) {
                assert_ne!(before[last.source], last.target);
            }
        }
        assert!(map.version() > 0);
        assert_eq!(map.mapping_at(map.version()), map.current());
        let forced = concept_shift_step(&map, 201, 0.0, ConceptShiftMode::Single, true, &mut rng);
        assert_eq!(forced.version(), map.version() + 1);
    }

    #[test]
    fn remap_frequency_is_binomial() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut map = LabelMap::identity(10);
        for round in 1..=10_000 {
            map = concept_shift_step(&map, round, 0.05, ConceptShiftMode::Single, false, &mut rng);
        }
        let n = map.version();
        assert!((440..=560).contains(&n), "{n}");
    }

    #[test]
    fn table_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let data = gen_synthetic(3, 4, 5, 9).unwrap();
        let p = dir.path().join("t.csv");
        write_table(&p, &data).unwrap();
        assert_eq!(load_table(&p, 3).unwrap(), data);

        let header_only = dir.path().join("h.csv");
        std::fs::write(&header_only, "f0,f1,label\n").unwrap();
        let empty = load_table(&header_only, 2).unwrap();
        assert!(empty.is_empty());
        assert_eq!(empty.dim(), 2);

        let bad = dir.path().join("bad.csv");
        let mut text = String::from("f0,f1,label\n");
        for _ in 0..5 {
            text.push_str("0.5,1.5,1\n");
        }
        text.push_str("0.5,abc,1\n");
        std::fs::write(&bad, text).unwrap();
        match load_table(&bad, 2) {
            Err(Error::Parse { line, message, .. }) => {
                assert_eq!(line, 7);
                assert!(message.contains("f1"));
            }
            other => panic!("unexpected {other:?}"),
        }

        let out_of_range = dir.path().join("oor.csv");
        std::fs::write(&out_of_range, "f0,f1,label\n1,2,5\n").unwrap();
        assert!(matches!(
            load_table(&out_of_range, 3),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(matches!(
            load_table(dir.path().join("missing.csv"), 3),
            Err(Error::Io { .. })
        ));
    }
}
