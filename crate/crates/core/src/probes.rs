//! Supervised probes on frozen latents: a logistic classifier for the
//! anomaly bit and an MLP regressor for the slice index.

use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};

use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::latent::{export_latents, LatentTable, Selection};
use crate::model::Glow;
use crate::objective::FactorSpec;
use crate::rng::Rng;

pub const REPORT_HEADER: &str = "task,feature_set,dim,metric,value,seed";
pub const TRAIN_FRACTION: f64 = 0.7;

/// Area under the ROC curve via the Mann-Whitney rank statistic; tied scores
/// share their average rank (half credit per tied pair).
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} scores, {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::invalid("AUC needs both classes"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks are 1-based; a tie block shares the mean of its ranks.
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos * neg) as f64)
}

pub fn accuracy(predicted: &[bool], labels: &[bool]) -> f64 {
    let hits = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len().max(1) as f64
}

pub fn mae(pred: &[f64], target: &[f64]) -> f64 {
    pred.iter().zip(target).map(|(p, t)| (p - t).abs()).sum::<f64>() / target.len().max(1) as f64
}

/// `1 - SS_res / SS_tot`; undefined for constant targets.
pub fn r2(pred: &[f64], target: &[f64]) -> Result<f64> {
    let mean = target.iter().sum::<f64>() / target.len() as f64;
    let ss_tot: f64 = target.iter().map(|t| (t - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(Error::invalid("R^2 is undefined for constant targets"));
    }
    let ss_res: f64 = pred.iter().zip(target).map(|(p, t)| (t - p).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Seeded 70/30 split. With `strata`, each stratum is split separately so
/// class proportions carry over to both sides.
pub fn train_test_split(n: usize, strata: Option<&[bool]>, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = Rng::new(seed);
    let groups: Vec<Vec<usize>> = match strata {
        Some(s) => vec![(0..n).filter(|&i| !s[i]).collect(), (0..n).filter(|&i| s[i]).collect()],
        None => vec![(0..n).collect()],
    };
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for mut g in groups {
        rng.shuffle(&mut g);
        let k = (g.len() as f64 * TRAIN_FRACTION).round() as usize;
        test.extend_from_slice(&g[k..]);
        g.truncate(k);
        train.extend(g);
    }
    (train, test)
}

fn to_matrix(rows: &[Vec<f64>], idx: &[usize]) -> Result<Array2<f64>> {
    let d = rows.first().map_or(0, Vec::len);
    if d == 0 || rows.iter().any(|r| r.len() != d) {
        return Err(Error::shape("feature rows must share a positive width"));
    }
    let flat: Vec<f64> = idx.iter().flat_map(|&i| rows[i].iter().copied()).collect();
    Ok(Array2::from_shape_vec((idx.len(), d), flat).expect("sized above"))
}

/// Per-column z-scoring fitted on training data.
#[derive(Clone, Debug)]
struct Standardizer {
    mean: Array1<f64>,
    std: Array1<f64>,
}

impl Standardizer {
    fn fit(x: &Array2<f64>) -> Self {
        let mean = x.mean_axis(Axis(0)).expect("nonempty");
        let std = x.std_axis(Axis(0), 0.0).mapv(|s| if s > 1e-12 { s } else { 1.0 });
        Standardizer { mean, std }
    }

    fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        (x - &self.mean) / &self.std
    }
}

/// Adam moments for one array.
struct AdamSlot<D: ndarray::Dimension> {
    m: ndarray::Array<f64, D>,
    v: ndarray::Array<f64, D>,
}

impl<D: ndarray::Dimension> AdamSlot<D> {
    fn new(shape: D) -> Self {
        AdamSlot {
            m: ndarray::Array::zeros(shape.clone()),
            v: ndarray::Array::zeros(shape),
        }
    }

    fn update(&mut self, p: &mut ndarray::Array<f64, D>, g: &ndarray::Array<f64, D>, lr: f64, t: i32) {
        let (b1, b2, eps) = (0.9, 0.999, 1e-8);
        self.m.zip_mut_with(g, |m, &g| *m = b1 * *m + (1.0 - b1) * g);
        self.v.zip_mut_with(g, |v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
        let (c1, c2) = (1.0 - f64::powi(b1, t), 1.0 - f64::powi(b2, t));
        ndarray::Zip::from(p).and(&self.m).and(&self.v).for_each(|p, &m, &v| {
            *p -= lr * (m / c1) / ((v / c2).sqrt() + eps);
        });
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// L2-regularized logistic regression on standardized features, fitted by
/// full-batch Adam.
#[derive(Clone, Debug)]
pub struct LogisticProbe {
    scaler: Standardizer,
    w: Array1<f64>,
    b: f64,
}

impl LogisticProbe {
    pub const ITERATIONS: usize = 500;
    pub const L2: f64 = 1e-3;

    pub fn fit(x: &Array2<f64>, y: &[bool]) -> Result<Self> {
        if !y.iter().any(|&l| l) || y.iter().all(|&l| l) {
            return Err(Error::invalid("classifier training data has a single class"));
        }
        let scaler = Standardizer::fit(x);
        let xs = scaler.apply(x);
        let yv = Array1::from_iter(y.iter().map(|&l| l as u8 as f64));
        let n = xs.nrows() as f64;
        let mut w: Array1<f64> = Array1::zeros(xs.ncols());
        let mut b: Array1<f64> = Array1::zeros(1);
        let (mut sw, mut sb) = (AdamSlot::new(w.raw_dim()), AdamSlot::new(b.raw_dim()));
        for t in 1..=Self::ITERATIONS as i32 {
            let p = (xs.dot(&w) + b[0]).mapv(sigmoid);
            let err = &p - &yv;
            let gw = xs.t().dot(&err) / n + &w * Self::L2;
            let gb = Array1::from_elem(1, err.sum() / n);
            sw.update(&mut w, &gw, 0.05, t);
            sb.update(&mut b, &gb, 0.05, t);
        }
        Ok(LogisticProbe { scaler, w, b: b[0] })
    }

    pub fn predict_proba(&self, x: &Array2<f64>) -> Vec<f64> {
        (self.scaler.apply(x).dot(&self.w) + self.b).mapv(sigmoid).to_vec()
    }
}

/// `input -> 64 -> 64 -> 1` with tanh hidden activations, trained with Adam
/// on minibatches of standardized inputs.
#[derive(Clone, Debug)]
pub struct MlpRegressor {
    scaler: Standardizer,
    w: [Array2<f64>; 3],
    b: [Array1<f64>; 3],
}

impl MlpRegressor {
    pub const HIDDEN: usize = 64;
    pub const EPOCHS: usize = 500;
    pub const BATCH: usize = 64;
    pub const LR: f64 = 1e-3;

    pub fn fit(x: &Array2<f64>, y: &[f64], seed: u64) -> Result<Self> {
        Self::fit_with(x, y, seed, Self::EPOCHS)
    }

    pub fn fit_with(x: &Array2<f64>, y: &[f64], seed: u64, epochs: usize) -> Result<Self> {
        if y.len() != x.nrows() || y.is_empty() {
            return Err(Error::shape("regressor targets do not match features"));
        }
        if y.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::invalid("regression targets must lie in [0, 1]"));
        }
        let mut rng = Rng::new(seed);
        let scaler = Standardizer::fit(x);
        let xs = scaler.apply(x);
        let dims = [xs.ncols(), Self::HIDDEN, Self::HIDDEN, 1];
        let mut glorot = |i: usize, o: usize| {
            let a = (6.0 / (i + o) as f64).sqrt();
            Array2::from_shape_fn((i, o), |_| rng.uniform(-a, a))
        };
        let mut w = [
            glorot(dims[0], dims[1]),
            glorot(dims[1], dims[2]),
            glorot(dims[2], dims[3]),
        ];
        let mut b = [Array1::zeros(dims[1]), Array1::zeros(dims[2]), Array1::zeros(dims[3])];
        let mut sw: Vec<AdamSlot<_>> = w.iter().map(|m| AdamSlot::new(m.raw_dim())).collect();
        let mut sb: Vec<AdamSlot<_>> = b.iter().map(|v| AdamSlot::new(v.raw_dim())).collect();
        let mut order: Vec<usize> = (0..xs.nrows()).collect();
        let mut t = 0;
        for _ in 0..epochs {
            rng.shuffle(&mut order);
            for chunk in order.chunks(Self::BATCH) {
                t += 1;
                let xb = xs.select(Axis(0), chunk);
                let yb = Array2::from_shape_fn((chunk.len(), 1), |(r, _)| y[chunk[r]]);
                let h1 = (xb.dot(&w[0]) + &b[0]).mapv(f64::tanh);
                let h2 = (h1.dot(&w[1]) + &b[1]).mapv(f64::tanh);
                let out = h2.dot(&w[2]) + &b[2];
                // Mean squared error.
                let d3 = (out - yb) * (2.0 / chunk.len() as f64);
                let gw2 = h2.t().dot(&d3);
                let gb2 = d3.sum_axis(Axis(0));
                let d2 = d3.dot(&w[2].t()) * h2.mapv(|h| 1.0 - h * h);
                let gw1 = h1.t().dot(&d2);
                let gb1 = d2.sum_axis(Axis(0));
                let d1 = d2.dot(&w[1].t()) * h1.mapv(|h| 1.0 - h * h);
                let gw0 = xb.t().dot(&d1);
                let gb0 = d1.sum_axis(Axis(0));
                for (k, (gw, gb)) in [(gw0, gb0), (gw1, gb1), (gw2, gb2)].into_iter().enumerate() {
                    sw[k].update(&mut w[k], &gw, Self::LR, t);
                    sb[k].update(&mut b[k], &gb, Self::LR, t);
                }
            }
        }
        Ok(MlpRegressor { scaler, w, b })
    }

    pub fn predict(&self, x: &Array2<f64>) -> Vec<f64> {
        let xs = self.scaler.apply(x);
        let h1 = (xs.dot(&self.w[0]) + &self.b[0]).mapv(f64::tanh);
        let h2 = (h1.dot(&self.w[1]) + &self.b[1]).mapv(f64::tanh);
        (h2.dot(&self.w[2]) + &self.b[2]).column(0).to_vec()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub auc: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegressionMetrics {
    pub mae: f64,
    pub r2: f64,
}

/// Fit a logistic probe on a stratified 70% split and score the rest.
pub fn classify(features: &[Vec<f64>], labels: &[bool], seed: u64) -> Result<ClassificationMetrics> {
    if features.len() != labels.len() {
        return Err(Error::shape("features and labels differ in length"));
    }
    let (train, test) = train_test_split(labels.len(), Some(labels), seed);
    let pick = |idx: &[usize]| idx.iter().map(|&i| labels[i]).collect::<Vec<_>>();
    let probe = LogisticProbe::fit(&to_matrix(features, &train)?, &pick(&train))?;
    let proba = probe.predict_proba(&to_matrix(features, &test)?);
    let y_test = pick(&test);
    let predicted: Vec<bool> = proba.iter().map(|&p| p >= 0.5).collect();
    Ok(ClassificationMetrics {
        accuracy: accuracy(&predicted, &y_test),
        auc: auc(&proba, &y_test)?,
    })
}

/// Fit the MLP regressor on a 70% split and score the rest.
pub fn regress(features: &[Vec<f64>], targets: &[f64], seed: u64, epochs: usize) -> Result<RegressionMetrics> {
    if features.len() != targets.len() {
        return Err(Error::shape("features and targets differ in length"));
    }
    let (train, test) = train_test_split(targets.len(), None, seed);
    let pick = |idx: &[usize]| idx.iter().map(|&i| targets[i]).collect::<Vec<_>>();
    let model = MlpRegressor::fit_with(&to_matrix(features, &train)?, &pick(&train), seed, epochs)?;
    let pred = model.predict(&to_matrix(features, &test)?);
    let y_test = pick(&test);
    Ok(RegressionMetrics {
        mae: mae(&pred, &y_test),
        r2: r2(&pred, &y_test)?,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeRecord {
    pub task: String,
    pub feature_set: String,
    pub dim: usize,
    pub metric: String,
    pub value: f64,
    pub seed: u64,
}

impl ProbeRecord {
    pub fn classification(feature_set: &str, dim: usize, m: ClassificationMetrics, seed: u64) -> [ProbeRecord; 2] {
        let rec = |metric: &str, value| ProbeRecord {
            task: "classification".into(),
            feature_set: feature_set.into(),
            dim,
            metric: metric.into(),
            value,
            seed,
        };
        [rec("accuracy", m.accuracy), rec("auc", m.auc)]
    }

    pub fn regression(feature_set: &str, dim: usize, m: RegressionMetrics, seed: u64) -> [ProbeRecord; 2] {
        let rec = |metric: &str, value| ProbeRecord {
            task: "regression".into(),
            feature_set: feature_set.into(),
            dim,
            metric: metric.into(),
            value,
            seed,
        };
        [rec("mae", m.mae), rec("r2", m.r2)]
    }
}

pub fn write_report(path: &Path, records: &[ProbeRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    let io = |e| Error::io(path, e);
    writeln!(f, "{REPORT_HEADER}").map_err(io)?;
    for r in records {
        writeln!(
            f,
            "{},{},{},{},{},{}",
            r.task, r.feature_set, r.dim, r.metric, r.value, r.seed
        )
        .map_err(io)?;
    }
    f.flush().map_err(io)
}

/// Mean of `metric` over records matching `task` and `feature_set`.
pub fn mean_metric(records: &[ProbeRecord], task: &str, feature_set: &str, metric: &str) -> Option<f64> {
    let v: Vec<f64> = records
        .iter()
        .filter(|r| r.task == task && r.feature_set == feature_set && r.metric == metric)
        .map(|r| r.value)
        .collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Probe each factor of a trained model: anomaly classification on the
/// anomaly and residual factors, slice regression on the slice and anomaly
/// factors. One probe per seed and feature set.
pub fn factor_report(
    model: &Glow,
    spec: &FactorSpec,
    corpus: &Corpus,
    seeds: &[u64],
    regressor_epochs: usize,
) -> Result<Vec<ProbeRecord>> {
    let find = |name: &str| {
        spec.index_of(name)
            .ok_or_else(|| Error::invalid(format!("factor spec has no `{name}` factor")))
    };
    let (ano, slx, res) = (find("anomaly")?, find("slice_index")?, find("residual")?);
    let tables: Vec<LatentTable> = [ano, slx, res]
        .iter()
        .map(|&m| export_latents(model, spec, corpus, Selection::Factor(m)))
        .collect::<Result<_>>()?;
    let labels = tables[0].labels();
    let anomaly: Vec<bool> = labels.iter().map(|l| l.anomaly).collect();
    let slice: Vec<f64> = labels.iter().map(|l| l.slice_index).collect();
    let mut out = Vec::new();
    for &seed in seeds {
        for (name, t) in [("anomaly", &tables[0]), ("residual", &tables[2])] {
            let m = classify(&t.features(), &anomaly, seed)?;
            out.extend(ProbeRecord::classification(name, t.dim(), m, seed));
        }
        for (name, t) in [("slice_index", &tables[1]), ("anomaly", &tables[0])] {
            let m = regress(&t.features(), &slice, seed, regressor_epochs)?;
            out.extend(ProbeRecord::regression(name, t.dim(), m, seed));
        }
    }
    Ok(out)
}

/// Anomaly AUC of a logistic probe for every exported noise level and seed:
/// rows of `(weight, seed, metrics)`.
pub fn sweep_classification(
    sweep: &[(crate::tensor::Float, LatentTable)],
    seeds: &[u64],
) -> Result<Vec<(f64, u64, ClassificationMetrics)>> {
    let mut out = Vec::new();
    for (w, table) in sweep {
        let labels: Vec<bool> = table.labels().iter().map(|l| l.anomaly).collect();
        let features = table.features();
        for &seed in seeds {
            out.push((*w as f64, seed, classify(&features, &labels, seed)?));
        }
    }
    Ok(out)
}
