//! Desk-scale training experiment: synthetic region-structured images and a
//! per-pixel logistic model fitted against cross-entropy or soft Dice.
//!
//! Every image is a set of regions. For each image and region one label
//! `c_j ~ Bernoulli(p_j)` is drawn and shared by all of the region's pixels,
//! which realizes a [`RegionModel`](crate::region::RegionModel) as data. With
//! [`FeatureMode::RegionOneHot`] the pixel features identify the region, so
//! the best any classifier can do is predict `p_j`; the trained model can be
//! compared directly against the theoretical risk minimizers in
//! [`optim`](crate::optim).

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{check_prob, Error, Result};
use crate::losses::{ce_element, dice_sums, SoftDice};
use crate::region::{RegionModel, ALPHA_VOLUME, GAMMA_VOLUME};

/// Seed offset separating the bootstrap stream from the training stream.
const BOOTSTRAP_STREAM: u64 = 0x5eed_b007;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum FeatureMode {
    /// One indicator feature per region.
    RegionOneHot,
    /// One scalar feature per pixel drawn from `N(±separation/2, 1)`
    /// depending on the pixel's label.
    GaussianOverlap { separation: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyDatasetSpec {
    pub n_images: usize,
    /// Pixel count of each region.
    pub region_pixels: Vec<usize>,
    pub region_probs: Vec<f64>,
    pub feature_mode: FeatureMode,
    pub seed: u64,
}

impl ToyDatasetSpec {
    /// Every region gets `pixels_per_region` pixels.
    pub fn uniform(n_images: usize, pixels_per_region: usize, region_probs: Vec<f64>, seed: u64) -> Self {
        Self {
            n_images,
            region_pixels: vec![pixels_per_region; region_probs.len()],
            region_probs,
            feature_mode: FeatureMode::RegionOneHot,
            seed,
        }
    }

    /// Background / uncertain / foreground geometry of the canonical model:
    /// `100·scale`, `μ·scale` and `scale` pixels. `μ·scale` must round to at
    /// least one pixel.
    pub fn canonical(mu: f64, p_beta: f64, n_images: usize, pixel_scale: usize, seed: u64) -> Result<Self> {
        let scale = pixel_scale as f64;
        let beta = (mu * scale).round();
        if beta < 1.0 {
            return Err(Error::domain(format!(
                "mu = {mu} at pixel scale {pixel_scale} leaves the uncertain region without pixels"
            )));
        }
        Ok(Self {
            n_images,
            region_pixels: vec![
                (ALPHA_VOLUME * scale).round() as usize,
                beta as usize,
                (GAMMA_VOLUME * scale).round() as usize,
            ],
            region_probs: vec![0.0, p_beta, 1.0],
            feature_mode: FeatureMode::RegionOneHot,
            seed,
        })
    }

    pub fn with_features(mut self, mode: FeatureMode) -> Self {
        self.feature_mode = mode;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.n_images == 0 {
            return Err(Error::domain("n_images must be at least 1"));
        }
        if self.region_probs.is_empty() || self.region_probs.len() != self.region_pixels.len() {
            return Err(Error::domain(
                "region_pixels and region_probs must be non-empty and of equal length",
            ));
        }
        if self.region_pixels.contains(&0) {
            return Err(Error::domain("every region needs at least one pixel"));
        }
        for &p in &self.region_probs {
            check_prob("region probability", p)?;
        }
        if let FeatureMode::GaussianOverlap { separation } = self.feature_mode {
            if !(separation.is_finite() && separation >= 0.0) {
                return Err(Error::domain("gaussian separation must be finite and >= 0"));
            }
        }
        Ok(())
    }

    /// The region model this dataset samples from (volumes in pixels).
    pub fn region_model(&self) -> Result<RegionModel> {
        let vols: Vec<f64> = self.region_pixels.iter().map(|&n| n as f64).collect();
        RegionModel::from_parts(&vols, &self.region_probs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyImage {
    /// Row-major `pixels × n_features`.
    pub features: Vec<f64>,
    /// Per-pixel labels as 0.0 / 1.0.
    pub labels: Vec<f64>,
    /// The drawn label of each region.
    pub region_labels: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyDataset {
    pub spec: ToyDatasetSpec,
    pub n_features: usize,
    /// Region index of every pixel (identical for all images).
    pub pixel_region: Vec<usize>,
    pub images: Vec<ToyImage>,
}

impl ToyDataset {
    pub fn n_pixels(&self) -> usize {
        self.pixel_region.len()
    }
}

/// Samples a dataset; deterministic per `spec.seed`.
pub fn generate(spec: &ToyDatasetSpec) -> Result<ToyDataset> {
    spec.validate()?;
    let n_regions = spec.region_probs.len();
    let pixel_region: Vec<usize> = spec
        .region_pixels
        .iter()
        .enumerate()
        .flat_map(|(j, &n)| std::iter::repeat_n(j, n))
        .collect();
    let n_features = match spec.feature_mode {
        FeatureMode::RegionOneHot => n_regions,
        FeatureMode::GaussianOverlap { .. } => 1,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut images = Vec::with_capacity(spec.n_images);
    for _ in 0..spec.n_images {
        let region_labels: Vec<bool> = spec
            .region_probs
            .iter()
            .map(|&p| rng.random::<f64>() < p)
            .collect();
        let labels: Vec<f64> = pixel_region
            .iter()
            .map(|&j| if region_labels[j] { 1.0 } else { 0.0 })
            .collect();
        let features = match spec.feature_mode {
            FeatureMode::RegionOneHot => {
                let mut f = vec![0.0; pixel_region.len() * n_features];
                for (i, &j) in pixel_region.iter().enumerate() {
                    f[i * n_features + j] = 1.0;
                }
                f
            }
            FeatureMode::GaussianOverlap { separation } => {
                let half = 0.5 * separation;
                let pos = Normal::new(half, 1.0).expect("unit variance");
                let neg = Normal::new(-half, 1.0).expect("unit variance");
                labels
                    .iter()
                    .map(|&y| if y == 1.0 { pos.sample(&mut rng) } else { neg.sample(&mut rng) })
                    .collect()
            }
        };
        images.push(ToyImage {
            features,
            labels,
            region_labels,
        });
    }
    Ok(ToyDataset {
        spec: spec.clone(),
        n_features,
        pixel_region,
        images,
    })
}

/// Per-pixel logistic regression. The last weight is the bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    pub weights: Vec<f64>,
}

impl ToyModel {
    pub fn zeros(n_features: usize) -> Self {
        Self {
            weights: vec![0.0; n_features + 1],
        }
    }

    pub fn n_features(&self) -> usize {
        self.weights.len() - 1
    }

    fn logit(&self, x: &[f64]) -> f64 {
        let (w, b) = self.weights.split_at(self.weights.len() - 1);
        w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + b[0]
    }

    /// Foreground probability of every pixel of `image`.
    pub fn predict(&self, image: &ToyImage) -> Vec<f64> {
        let nf = self.n_features();
        image
            .features
            .chunks_exact(nf)
            .map(|x| sigmoid(self.logit(x)))
            .collect()
    }
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Binary cross-entropy summed over an image's pixels.
    Ce,
    /// Soft Dice computed per image.
    Sd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Optimizer {
    GradientDescent,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Epochs without validation improvement before the rate is dropped.
    pub patience_lr: usize,
    /// Epochs without validation improvement before training stops.
    pub patience_stop: usize,
    pub lr_drop_factor: f64,
    /// Fraction of images held out for validation and reporting.
    pub val_fraction: f64,
    pub seed: u64,
}

impl TrainConfig {
    /// Full-batch gradient descent with a step size suited to each loss's
    /// gradient scale (summed cross-entropy over ~100 pixels has curvature
    /// in the tens, per-image soft Dice well below one).
    pub fn new(loss: LossKind, seed: u64) -> Self {
        let learning_rate = match loss {
            LossKind::Ce => 0.5,
            LossKind::Sd => 2.0,
        };
        Self {
            loss,
            optimizer: Optimizer::GradientDescent,
            learning_rate,
            max_epochs: 3000,
            patience_lr: 75,
            patience_stop: 150,
            lr_drop_factor: 0.2,
            val_fraction: 0.2,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::domain("learning rate must be > 0"));
        }
        if self.max_epochs == 0 || self.patience_lr == 0 || self.patience_stop == 0 {
            return Err(Error::domain("epoch counts and patiences must be >= 1"));
        }
        if !(self.lr_drop_factor > 0.0 && self.lr_drop_factor < 1.0) {
            return Err(Error::domain("lr_drop_factor must lie in (0, 1)"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::domain("val_fraction must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean per-pixel cross-entropy, averaged over images.
    pub final_ce: f64,
    /// Mean `1 - SD` over images.
    pub final_soft_dice_score: f64,
    /// Mean `V(Ŷ) - V(Y)` over images, in pixels.
    pub delta_v_mean: f64,
    /// Percentile bootstrap 95% interval of `delta_v_mean`.
    pub delta_v_ci: (f64, f64),
    pub epochs_run: usize,
    /// Mean prediction over each region's pixels.
    pub per_region_p_hat: Vec<f64>,
    pub n_images: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub bootstrap_resamples: usize,
    pub seed: u64,
}

impl EvalOptions {
    pub fn new(seed: u64) -> Self {
        Self {
            bootstrap_resamples: 10_000,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub model: ToyModel,
    pub report: TrainReport,
    pub trace: Vec<EpochRecord>,
    pub train_images: Vec<usize>,
    pub val_images: Vec<usize>,
}

/// Seeded split of image indices into `(train, validation)`. A single image
/// is used for both.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((n as f64) * val_fraction).round() as usize;
    let n_val = n_val.min(n.saturating_sub(1));
    if n_val == 0 {
        return (idx.clone(), idx);
    }
    let val = idx[..n_val].to_vec();
    let mut train = idx[n_val..].to_vec();
    train.sort_unstable();
    let mut val = val;
    val.sort_unstable();
    (train, val)
}

/// Mean loss over `images` and, when `grad` is given, the gradient w.r.t.
/// the model weights accumulated into it.
fn loss_and_grad(
    model: &ToyModel,
    data: &ToyDataset,
    images: &[usize],
    loss: LossKind,
    mut grad: Option<&mut [f64]>,
) -> Result<f64> {
    let nf = model.n_features();
    if let Some(g) = grad.as_deref_mut() {
        g.fill(0.0);
    }
    let scale = 1.0 / images.len() as f64;
    let mut total = 0.0;
    let mut d_pred = vec![0.0; data.n_pixels()];
    for &i in images {
        let img = &data.images[i];
        let pred = model.predict(img);
        match loss {
            LossKind::Ce => {
                total += pred.iter().zip(&img.labels).map(|(&p, &y)| ce_element(p, y)).sum::<f64>();
            }
            LossKind::Sd => {
                let (inter, denom) = dice_sums(&pred, &img.labels);
                total += SoftDice::default().loss_from_sums(inter, denom);
            }
        }
        let Some(g) = grad.as_deref_mut() else {
            continue;
        };
        // d_pred holds ∂L/∂logit per pixel.
        match loss {
            LossKind::Ce => {
                for ((d, &p), &y) in d_pred.iter_mut().zip(&pred).zip(&img.labels) {
                    *d = p - y;
                }
            }
            LossKind::Sd => {
                if SoftDice::default().grad_into(&pred, &img.labels, &mut d_pred).is_err() {
                    continue; // empty prediction on an empty image: flat
                }
                for (d, &p) in d_pred.iter_mut().zip(&pred) {
                    *d *= p * (1.0 - p);
                }
            }
        }
        let (gw, gb) = g.split_at_mut(nf);
        for (x, &d) in img.features.chunks_exact(nf).zip(&d_pred) {
            for (w, &xf) in gw.iter_mut().zip(x) {
                *w += scale * d * xf;
            }
            gb[0] += scale * d;
        }
    }
    let mean = total * scale;
    if !mean.is_finite() {
        return Err(Error::Numerical(format!("training loss became non-finite ({mean})")));
    }
    Ok(mean)
}

/// Fits `init` on `train` with validation-driven rate drops and early
/// stopping; returns the weights with the best validation loss.
pub fn fit(
    data: &ToyDataset,
    train: &[usize],
    val: &[usize],
    init: &ToyModel,
    config: &TrainConfig,
) -> Result<(ToyModel, Vec<EpochRecord>)> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::contract("training split is empty"));
    }
    if init.n_features() != data.n_features {
        return Err(Error::contract(format!(
            "model expects {} features, dataset has {}",
            init.n_features(),
            data.n_features
        )));
    }
    let val = if val.is_empty() { train } else { val };

    let mut model = init.clone();
    let mut grad = vec![0.0; model.weights.len()];
    let mut m = vec![0.0; grad.len()];
    let mut v = vec![0.0; grad.len()];
    let mut lr = config.learning_rate;
    let mut best = (f64::INFINITY, model.clone());
    let (mut best_epoch, mut last_drop) = (0, 0);
    let mut trace = Vec::new();

    for epoch in 1..=config.max_epochs {
        let train_loss = loss_and_grad(&model, data, train, config.loss, Some(&mut grad))?;
        match config.optimizer {
            Optimizer::GradientDescent => {
                for (w, g) in model.weights.iter_mut().zip(&grad) {
                    *w -= lr * g;
                }
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                let t = epoch as i32;
                for k in 0..grad.len() {
                    m[k] = beta1 * m[k] + (1.0 - beta1) * grad[k];
                    v[k] = beta2 * v[k] + (1.0 - beta2) * grad[k] * grad[k];
                    let m_hat = m[k] / (1.0 - beta1.powi(t));
                    let v_hat = v[k] / (1.0 - beta2.powi(t));
                    model.weights[k] -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
        if model.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Numerical(format!("weights diverged at epoch {epoch}")));
        }
        let val_loss = loss_and_grad(&model, data, val, config.loss, None)?;
        trace.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            learning_rate: lr,
        });

        if val_loss < best.0 {
            best = (val_loss, model.clone());
            best_epoch = epoch;
        }
        if epoch - best_epoch >= config.patience_stop {
            break;
        }
        if epoch - best_epoch.max(last_drop) >= config.patience_lr {
            lr *= config.lr_drop_factor;
            last_drop = epoch;
        }
    }
    Ok((best.1, trace))
}

/// Splits, fits and evaluates on the held-out images.
pub fn train(data: &ToyDataset, init: &ToyModel, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let (train_images, val_images) = split_indices(data.images.len(), config.val_fraction, config.seed);
    let (model, trace) = fit(data, &train_images, &val_images, init, config)?;
    let eval = EvalOptions::new(config.seed ^ BOOTSTRAP_STREAM);
    let mut report = evaluate_images(&model, data, &val_images, &eval)?;
    report.epochs_run = trace.len();
    Ok(TrainOutcome {
        model,
        report,
        trace,
        train_images,
        val_images,
    })
}

/// Per-image metrics of a fitted model.
#[derive(Debug, Clone, Default)]
struct ImageMetrics {
    ce_per_pixel: Vec<f64>,
    dice_score: Vec<f64>,
    delta_v: Vec<f64>,
    region_sum: Vec<f64>,
    region_count: Vec<f64>,
}

impl ImageMetrics {
    fn collect(model: &ToyModel, data: &ToyDataset, images: &[usize]) -> Self {
        let n_regions = data.spec.region_probs.len();
        let mut out = ImageMetrics {
            region_sum: vec![0.0; n_regions],
            region_count: vec![0.0; n_regions],
            ..Default::default()
        };
        for &i in images {
            let img = &data.images[i];
            let pred = model.predict(img);
            let ce: f64 = pred.iter().zip(&img.labels).map(|(&p, &y)| ce_element(p, y)).sum();
            out.ce_per_pixel.push(ce / pred.len() as f64);
            let (inter, denom) = dice_sums(&pred, &img.labels);
            out.dice_score.push(1.0 - SoftDice::default().loss_from_sums(inter, denom));
            out.delta_v
                .push(pred.iter().sum::<f64>() - img.labels.iter().sum::<f64>());
            for (&j, &p) in data.pixel_region.iter().zip(&pred) {
                out.region_sum[j] += p;
                out.region_count[j] += 1.0;
            }
        }
        out
    }

    fn extend(&mut self, other: ImageMetrics) {
        self.ce_per_pixel.extend(other.ce_per_pixel);
        self.dice_score.extend(other.dice_score);
        self.delta_v.extend(other.delta_v);
        if self.region_sum.is_empty() {
            self.region_sum = other.region_sum;
            self.region_count = other.region_count;
        } else {
            for j in 0..self.region_sum.len() {
                self.region_sum[j] += other.region_sum[j];
                self.region_count[j] += other.region_count[j];
            }
        }
    }

    fn report(&self, opts: &EvalOptions) -> TrainReport {
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        TrainReport {
            final_ce: mean(&self.ce_per_pixel),
            final_soft_dice_score: mean(&self.dice_score),
            delta_v_mean: mean(&self.delta_v),
            delta_v_ci: bootstrap_mean_ci(&self.delta_v, opts.bootstrap_resamples, opts.seed),
            epochs_run: 0,
            per_region_p_hat: self
                .region_sum
                .iter()
                .zip(&self.region_count)
                .map(|(s, c)| s / c)
                .collect(),
            n_images: self.delta_v.len(),
        }
    }
}

/// Metrics over every image of `data`.
pub fn evaluate(model: &ToyModel, data: &ToyDataset, opts: &EvalOptions) -> Result<TrainReport> {
    let all: Vec<usize> = (0..data.images.len()).collect();
    evaluate_images(model, data, &all, opts)
}

pub fn evaluate_images(
    model: &ToyModel,
    data: &ToyDataset,
    images: &[usize],
    opts: &EvalOptions,
) -> Result<TrainReport> {
    if images.is_empty() {
        return Err(Error::contract("cannot evaluate on zero images"));
    }
    if model.n_features() != data.n_features {
        return Err(Error::contract("model and dataset feature counts differ"));
    }
    Ok(ImageMetrics::collect(model, data, images).report(opts))
}

/// Percentile bootstrap 95% interval for the mean of `values`.
pub fn bootstrap_mean_ci(values: &[f64], resamples: usize, seed: u64) -> (f64, f64) {
    let n = values.len();
    if n == 0 || resamples == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| values[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let at = |q: f64| means[((resamples - 1) as f64 * q).round() as usize];
    (at(0.025), at(0.975))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvOutcome {
    pub folds: Vec<TrainReport>,
    /// Metrics over the pooled held-out predictions of all folds.
    pub pooled: TrainReport,
    pub traces: Vec<Vec<EpochRecord>>,
}

/// `k`-fold cross-validation. Each fold's held-out images drive early
/// stopping and are the ones evaluated.
pub fn cross_validate(data: &ToyDataset, init: &ToyModel, config: &TrainConfig, k: usize) -> Result<CvOutcome> {
    config.validate()?;
    let n = data.images.len();
    if k < 2 || k > n {
        return Err(Error::domain(format!("fold count must lie in [2, {n}], got {k}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed));

    let mut folds = Vec::with_capacity(k);
    let mut traces = Vec::with_capacity(k);
    let mut pooled = ImageMetrics::default();
    for f in 0..k {
        let (lo, hi) = (f * n / k, (f + 1) * n / k);
        let mut held: Vec<usize> = order[lo..hi].to_vec();
        let mut rest: Vec<usize> = order[..lo].iter().chain(&order[hi..]).copied().collect();
        held.sort_unstable();
        rest.sort_unstable();
        let (model, trace) = fit(data, &rest, &held, init, config)?;
        let eval = EvalOptions::new(config.seed ^ BOOTSTRAP_STREAM ^ (f as u64 + 1));
        let metrics = ImageMetrics::collect(&model, data, &held);
        let mut report = metrics.report(&eval);
        report.epochs_run = trace.len();
        folds.push(report);
        traces.push(trace);
        pooled.extend(metrics);
    }
    let pooled = pooled.report(&EvalOptions::new(config.seed ^ BOOTSTRAP_STREAM));
    Ok(CvOutcome { folds, pooled, traces })
}
