//! Joint softmax + center-loss training: class centers, RMSProp, the step
//! learning-rate schedule, a synthetic identity dataset, and the epoch loop.

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Result, SeidError};
use crate::init::rng_for;
use crate::model::Model;
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct LossConfig {
    /// Center-loss weight λ.
    pub lambda: f64,
    /// Center update rate α, in (0, 1].
    pub alpha: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 0.01,
            alpha: 0.9,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 {
            return Err(SeidError::config(format!("lambda {} must be >= 0", self.lambda)));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(SeidError::config(format!("alpha {} must be in (0, 1]", self.alpha)));
        }
        Ok(())
    }
}

/// One center per class, same width as the model's feature vector.
#[derive(Debug, Clone)]
pub struct ClassCenters {
    pub centers: Tensor,
}

impl ClassCenters {
    pub fn zeros(num_classes: usize, width: usize) -> Self {
        ClassCenters {
            centers: Tensor::zeros(&[num_classes, width]),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.centers.shape.dims()[0]
    }

    pub fn width(&self) -> usize {
        self.centers.shape.dims()[1]
    }
}

/// Δc_j = Σ_{i: yᵢ=j} (c_j − xᵢ) / (1 + count_j); c_j ← c_j − α·Δc_j.
/// Classes with no samples in the batch are untouched.
pub fn update_centers(
    features: &Tensor,
    labels: &[usize],
    centers: &mut ClassCenters,
    alpha: f64,
) -> Result<()> {
    let dims = features.shape.dims();
    if dims.len() != 2 || dims[1] != centers.width() {
        return Err(SeidError::shape(format!(
            "features {} do not match centers {}",
            features.shape, centers.centers.shape
        )));
    }
    let (n, d) = (dims[0], dims[1]);
    if labels.len() != n {
        return Err(SeidError::contract(format!(
            "{} labels for {n} feature rows",
            labels.len()
        )));
    }
    let m = centers.num_classes();
    let mut delta = vec![0.0; m * d];
    let mut counts = vec![0usize; m];
    for (i, &y) in labels.iter().enumerate() {
        if y >= m {
            return Err(SeidError::contract(format!("label {y} out of range {m}")));
        }
        counts[y] += 1;
        for j in 0..d {
            delta[y * d + j] += centers.centers.data[y * d + j] - features.data[i * d + j];
        }
    }
    for y in 0..m {
        if counts[y] == 0 {
            continue;
        }
        let scale = alpha / (1.0 + counts[y] as f64);
        for j in 0..d {
            centers.centers.data[y * d + j] -= scale * delta[y * d + j];
        }
    }
    Ok(())
}

/// L = L_softmax + λ·L_center, recorded on the tape (centers constant).
pub fn joint_loss(
    tape: &mut Tape,
    logits: Var,
    features: Var,
    labels: &[usize],
    centers: &ClassCenters,
    cfg: &LossConfig,
) -> Result<Var> {
    let ce = tape.softmax_cross_entropy(logits, labels)?;
    if cfg.lambda == 0.0 {
        return Ok(ce);
    }
    let cl = tape.center_loss(features, labels, &centers.centers)?;
    let weighted = tape.scale(cl, cfg.lambda);
    tape.add(ce, weighted)
}

/// RMSProp accumulator, one cache tensor per named parameter.
#[derive(Debug, Clone)]
pub struct RmsPropState {
    pub cache: IndexMap<String, Tensor>,
    pub decay: f64,
    pub epsilon: f64,
}

impl RmsPropState {
    pub fn new(params: &ParamStore) -> Self {
        let cache = params
            .iter()
            .map(|(name, t)| (name.clone(), Tensor::zeros(t.shape.dims())))
            .collect();
        RmsPropState {
            cache,
            decay: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// cache ← decay·cache + (1−decay)·g²; param ← param − lr·g/(√cache + ε).
pub fn rmsprop_step(
    params: &mut ParamStore,
    grads: &IndexMap<String, Tensor>,
    state: &mut RmsPropState,
    lr: f64,
) -> Result<()> {
    for (name, g) in grads {
        let p = params.get_mut(name)?;
        let c = state.cache.get_mut(name).ok_or_else(|| {
            SeidError::contract(format!("no optimizer cache for parameter '{name}'"))
        })?;
        if p.shape != g.shape || c.shape != g.shape {
            return Err(SeidError::contract(format!(
                "rmsprop: shape mismatch for '{name}': param {}, grad {}, cache {}",
                p.shape, g.shape, c.shape
            )));
        }
        for ((pv, cv), gv) in p.data.iter_mut().zip(&mut c.data).zip(&g.data) {
            *cv = state.decay * *cv + (1.0 - state.decay) * gv * gv;
            *pv -= lr * gv / (cv.sqrt() + state.epsilon);
        }
    }
    Ok(())
}

/// Step schedule: lr = base·factor^(#drops at or before the epoch).
#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub drop_epochs: Vec<usize>,
    pub factor: f64,
    pub stop_epoch: usize,
}

impl LrSchedule {
    /// The published schedule: 0.1, /10 at epochs 10 and 20, stop at 25.
    pub fn paper() -> Self {
        LrSchedule {
            base: 0.1,
            drop_epochs: vec![10, 20],
            factor: 0.1,
            stop_epoch: 25,
        }
    }

    /// Scaled-down schedule for the desk preset (RMSProp-sized base rate).
    pub fn desk() -> Self {
        LrSchedule {
            base: 1e-3,
            drop_epochs: vec![6, 12],
            factor: 0.1,
            stop_epoch: 15,
        }
    }
}

pub fn lr_at_epoch(schedule: &LrSchedule, epoch: usize) -> Result<f64> {
    if epoch >= schedule.stop_epoch {
        return Err(SeidError::contract(format!(
            "epoch {epoch} is at or past stop_epoch {}",
            schedule.stop_epoch
        )));
    }
    if schedule.drop_epochs.windows(2).any(|w| w[0] >= w[1]) {
        return Err(SeidError::config(
            "drop_epochs must be strictly increasing".to_string(),
        ));
    }
    let drops = schedule.drop_epochs.iter().filter(|&&d| d <= epoch).count();
    // divide rather than multiply by factor^drops: 0.1/10 is the nearest
    // double to 0.01, while 0.1*0.1 is not
    let inv = 1.0 / schedule.factor;
    Ok(schedule.base / inv.powi(drops as i32))
}

/// Identity-prototype dataset: each class is a fixed low-resolution pattern
/// upsampled to the working size, each image that pattern plus noise, with an
/// optional quality-degradation pass (box blur + 2x down/up-sample).
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_dims(&self) -> (usize, usize, usize) {
        let d = self.images.shape.dims();
        (d[1], d[2], d[3])
    }

    /// Copy rows `indices` into a fresh N x C x H x W batch.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let d = self.images.shape.dims();
        let stride = d[1] * d[2] * d[3];
        let mut data = Vec::with_capacity(indices.len() * stride);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.images.data[i * stride..(i + 1) * stride]);
            labels.push(self.labels[i]);
        }
        let t = Tensor::from_dims(&[indices.len(), d[1], d[2], d[3]], data).unwrap();
        (t, labels)
    }
}

/// 3x3 box blur with edge clamping, per channel.
pub fn box_blur(image: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; image.len()];
    for ch in 0..c {
        let plane = &image[ch * h * w..(ch + 1) * h * w];
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                let mut cnt = 0.0;
                for di in -1i64..=1 {
                    for dj in -1i64..=1 {
                        let (ii, jj) = (i as i64 + di, j as i64 + dj);
                        if ii >= 0 && ii < h as i64 && jj >= 0 && jj < w as i64 {
                            acc += plane[ii as usize * w + jj as usize];
                            cnt += 1.0;
                        }
                    }
                }
                out[ch * h * w + i * w + j] = acc / cnt;
            }
        }
    }
    out
}

/// 2x average-pool downsample followed by nearest-neighbor upsample back.
pub fn down_up_sample(image: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (h2, w2) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = vec![0.0; image.len()];
    for ch in 0..c {
        let plane = &image[ch * h * w..(ch + 1) * h * w];
        for bi in 0..h2 {
            for bj in 0..w2 {
                let mut acc = 0.0;
                let mut cnt = 0.0;
                for i in (bi * 2)..((bi * 2 + 2).min(h)) {
                    for j in (bj * 2)..((bj * 2 + 2).min(w)) {
                        acc += plane[i * w + j];
                        cnt += 1.0;
                    }
                }
                let v = acc / cnt;
                for i in (bi * 2)..((bi * 2 + 2).min(h)) {
                    for j in (bj * 2)..((bj * 2 + 2).min(w)) {
                        out[ch * h * w + i * w + j] = v;
                    }
                }
            }
        }
    }
    out
}

/// Apply the quality-degradation pass to one C x H x W image.
pub fn degrade_image(image: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let blurred = box_blur(image, c, h, w);
    down_up_sample(&blurred, c, h, w)
}

fn standard_normal(rng: &mut impl Rng) -> f64 {
    // Box-Muller; u1 bounded away from 0
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

const PROTO_RES: usize = 8;
const CHANNELS: usize = 3;

/// Per-class prototype: a random 8x8 grid in [0,1] upsampled (nearest) to
/// `size` — coarse enough for a small convolutional net to learn.
fn prototype(class: usize, size: usize, seed: u64) -> Vec<f64> {
    let mut rng = rng_for(seed, &format!("synthetic.proto{class}"));
    let coarse: Vec<f64> = (0..CHANNELS * PROTO_RES * PROTO_RES)
        .map(|_| rng.random_range(0.0..1.0))
        .collect();
    let mut out = vec![0.0; CHANNELS * size * size];
    for ch in 0..CHANNELS {
        for i in 0..size {
            for j in 0..size {
                let pi = i * PROTO_RES / size;
                let pj = j * PROTO_RES / size;
                out[ch * size * size + i * size + j] =
                    coarse[ch * PROTO_RES * PROTO_RES + pi * PROTO_RES + pj];
            }
        }
    }
    out
}

pub fn generate_synthetic_faces(
    num_classes: usize,
    per_class: usize,
    size: usize,
    noise: f64,
    degrade: bool,
    seed: u64,
) -> SyntheticDataset {
    let stride = CHANNELS * size * size;
    let mut data = Vec::with_capacity(num_classes * per_class * stride);
    let mut labels = Vec::with_capacity(num_classes * per_class);
    for class in 0..num_classes {
        let proto = prototype(class, size, seed);
        for img in 0..per_class {
            let mut rng = rng_for(seed, &format!("synthetic.img{class}.{img}"));
            let mut pixels: Vec<f64> = proto
                .iter()
                .map(|&p| p + noise * standard_normal(&mut rng))
                .collect();
            if degrade {
                pixels = degrade_image(&pixels, CHANNELS, size, size);
            }
            data.extend_from_slice(&pixels);
            labels.push(class);
        }
    }
    let images = Tensor::from_dims(&[num_classes * per_class, CHANNELS, size, size], data).unwrap();
    SyntheticDataset {
        images,
        labels,
        num_classes,
    }
}

/// Mirror every image in a batch left-right (W axis).
pub fn flip_horizontal(batch: &Tensor) -> Tensor {
    let d = batch.shape.dims();
    let (n, c, h, w) = (d[0], d[1], d[2], d[3]);
    let mut data = batch.data.clone();
    for plane in data.chunks_mut(w).take(n * c * h) {
        plane.reverse();
    }
    Tensor::from_dims(&[n, c, h, w], data).unwrap()
}

#[derive(Debug, Clone, Copy)]
pub struct EpochStats {
    pub loss: f64,
    pub accuracy: f64,
    /// Samples seen, counting augmented copies.
    pub samples_seen: usize,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub loss: LossConfig,
    pub schedule: LrSchedule,
    pub batch_size: usize,
    pub flip_augment: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss: LossConfig::default(),
            schedule: LrSchedule::desk(),
            batch_size: 32,
            flip_augment: false,
            seed: 0,
        }
    }
}

/// One pass over the dataset: seeded shuffle, then per batch forward /
/// joint loss / backward / RMSProp / center update.
pub fn train_epoch(
    model: &mut Model,
    dataset: &SyntheticDataset,
    opt: &mut RmsPropState,
    centers: &mut ClassCenters,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<EpochStats> {
    cfg.loss.validate()?;
    if dataset.is_empty() {
        return Err(SeidError::contract("empty dataset".to_string()));
    }
    let lr = lr_at_epoch(&cfg.schedule, epoch)?;
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut rng = rng_for(cfg.seed, &format!("train.epoch{epoch}"));
    order.shuffle(&mut rng);

    let mut total_loss = 0.0;
    let mut correct = 0usize;
    let mut seen = 0usize;
    for chunk in order.chunks(cfg.batch_size) {
        let (batch, mut labels) = dataset.gather(chunk);
        let batch = if cfg.flip_augment {
            let flipped = flip_horizontal(&batch);
            let mut data = batch.data;
            data.extend_from_slice(&flipped.data);
            let d = batch.shape.dims().to_vec();
            labels.extend_from_within(..);
            Tensor::from_dims(&[2 * d[0], d[1], d[2], d[3]], data).unwrap()
        } else {
            batch
        };
        let out = model.forward_train(&batch)?;
        let mut tape = out.tape;
        let loss = joint_loss(&mut tape, out.logits, out.features, &labels, centers, &cfg.loss)?;
        let loss_value = tape.value(loss).scalar_value()?;
        if !loss_value.is_finite() {
            return Err(SeidError::contract(format!(
                "non-finite loss {loss_value} at epoch {epoch}"
            )));
        }
        let n = labels.len();
        total_loss += loss_value * n as f64;
        seen += n;
        let logits = tape.value(out.logits);
        let classes = logits.shape.dims()[1];
        for (i, &y) in labels.iter().enumerate() {
            let row = &logits.data[i * classes..(i + 1) * classes];
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            if argmax == y {
                correct += 1;
            }
        }
        let feats = tape.value(out.features).clone();
        let grads = tape.backward(loss)?;
        let named: IndexMap<String, Tensor> = out
            .param_vars
            .iter()
            .map(|(name, &v)| (name.clone(), grads.grad(&tape, v)))
            .collect();
        rmsprop_step(&mut model.params, &named, opt, lr)?;
        update_centers(&feats, &labels, centers, cfg.loss.alpha)?;
    }
    Ok(EpochStats {
        loss: total_loss / seen as f64,
        accuracy: correct as f64 / seen as f64,
        samples_seen: seen,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub train_acc: f64,
}

/// Run epochs `start_epoch..stop_epoch`, invoking `on_epoch` after each.
pub fn train_loop(
    model: &mut Model,
    dataset: &SyntheticDataset,
    opt: &mut RmsPropState,
    centers: &mut ClassCenters,
    cfg: &TrainConfig,
    start_epoch: usize,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    let mut logs = Vec::new();
    for epoch in start_epoch..cfg.schedule.stop_epoch {
        let stats = train_epoch(model, dataset, opt, centers, cfg, epoch)?;
        let log = EpochLog {
            epoch,
            lr: lr_at_epoch(&cfg.schedule, epoch)?,
            loss: stats.loss,
            train_acc: stats.accuracy,
        };
        on_epoch(&log);
        logs.push(log);
    }
    Ok(logs)
}

/// Mean distance from each feature row to its class mean (not the learned
/// center) — the quantity center loss is meant to shrink.
pub fn mean_intra_class_distance(features: &Tensor, labels: &[usize]) -> f64 {
    let d = features.shape.dims()[1];
    let m = labels.iter().max().map_or(0, |&y| y + 1);
    let mut sums = vec![0.0; m * d];
    let mut counts = vec![0usize; m];
    for (i, &y) in labels.iter().enumerate() {
        counts[y] += 1;
        for j in 0..d {
            sums[y * d + j] += features.data[i * d + j];
        }
    }
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let mut sq = 0.0;
        for j in 0..d {
            let mean = sums[y * d + j] / counts[y] as f64;
            let diff = features.data[i * d + j] - mean;
            sq += diff * diff;
        }
        total += sq.sqrt();
    }
    total / labels.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check_multi;
    use crate::model::{build_model, ArchitectureConfig};
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn lr_schedule_paper_sequence() {
        let s = LrSchedule::paper();
        let seq: Vec<f64> = (0..25).map(|e| lr_at_epoch(&s, e).unwrap()).collect();
        for (e, lr) in seq.iter().enumerate() {
            let expect = if e < 10 {
                0.1
            } else if e < 20 {
                0.01
            } else {
                0.001
            };
            assert_abs_diff_eq!(*lr, expect, epsilon = 1e-15);
        }
        assert!(lr_at_epoch(&s, 25).is_err());
        assert_abs_diff_eq!(lr_at_epoch(&s, 9).unwrap(), 0.1, epsilon = 1e-15);
    }

    #[test]
    fn rmsprop_first_step_scalar() {
        let mut params = ParamStore::new();
        params.insert("w", Tensor::from_dims(&[1], vec![1.0]).unwrap());
        let mut state = RmsPropState::new(&params);
        let mut grads = IndexMap::new();
        grads.insert("w".to_string(), Tensor::from_dims(&[1], vec![1.0]).unwrap());
        rmsprop_step(&mut params, &grads, &mut state, 0.1).unwrap();
        let cache = state.cache["w"].data[0];
        assert_abs_diff_eq!(cache, 0.001, epsilon = 1e-15);
        let step = 0.1 / (0.001f64.sqrt() + 1e-8);
        assert_abs_diff_eq!(params.get("w").unwrap().data[0], 1.0 - step, epsilon = 1e-12);
        assert!((step - 3.162277).abs() < 1e-5);
    }

    #[test]
    fn rmsprop_zero_grad_is_identity_on_params() {
        let mut params = ParamStore::new();
        params.insert("w", Tensor::from_dims(&[2], vec![0.5, -0.25]).unwrap());
        let mut state = RmsPropState::new(&params);
        state.cache.get_mut("w").unwrap().data = vec![0.04, 0.09];
        let mut grads = IndexMap::new();
        grads.insert("w".to_string(), Tensor::zeros(&[2]));
        rmsprop_step(&mut params, &grads, &mut state, 0.1).unwrap();
        assert_eq!(params.get("w").unwrap().data, vec![0.5, -0.25]);
        assert_abs_diff_eq!(state.cache["w"].data[0], 0.999 * 0.04, epsilon = 1e-15);
    }

    #[test]
    fn rmsprop_moves_against_gradient_sign() {
        let mut params = ParamStore::new();
        params.insert("w", Tensor::from_dims(&[2], vec![0.0, 0.0]).unwrap());
        let mut state = RmsPropState::new(&params);
        let mut grads = IndexMap::new();
        grads.insert("w".to_string(), Tensor::from_dims(&[2], vec![2.0, -3.0]).unwrap());
        rmsprop_step(&mut params, &grads, &mut state, 0.05).unwrap();
        let w = &params.get("w").unwrap().data;
        assert!(w[0] < 0.0 && w[1] > 0.0);
    }

    #[test]
    fn centers_move_halfway_with_alpha_one() {
        let mut centers = ClassCenters::zeros(2, 2);
        centers.centers.data = vec![1.0, 1.0, 0.0, 0.0];
        let feats = Tensor::from_dims(&[1, 2], vec![3.0, 5.0]).unwrap();
        update_centers(&feats, &[0], &mut centers, 1.0).unwrap();
        // Δ = (c - x)/2 = [-1, -2]; c ← c - Δ = [2, 3]
        assert_eq!(&centers.centers.data[0..2], &[2.0, 3.0]);
        // class 1 untouched
        assert_eq!(&centers.centers.data[2..4], &[0.0, 0.0]);
    }

    #[test]
    fn centers_converge_to_class_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 24;
        let d = 5;
        let feats = Tensor::from_dims(
            &[n, d],
            (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect(),
        )
        .unwrap();
        let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
        for alpha in [0.5, 0.9, 1.0] {
            let mut centers = ClassCenters::zeros(3, d);
            let mut last = f64::INFINITY;
            for _ in 0..2000 {
                update_centers(&feats, &labels, &mut centers, alpha).unwrap();
                let mut tape = Tape::new();
                let f = tape.constant(feats.clone());
                let l = tape.center_loss(f, &labels, &centers.centers).unwrap();
                let v = tape.value(l).scalar_value().unwrap();
                assert!(v <= last + 1e-12, "center loss rose: {v} > {last}");
                last = v;
            }
            // compare against per-class means
            for y in 0..3 {
                let rows: Vec<usize> = (0..n).filter(|i| i % 3 == y).collect();
                for j in 0..d {
                    let mean: f64 =
                        rows.iter().map(|&i| feats.data[i * d + j]).sum::<f64>() / rows.len() as f64;
                    assert!(
                        (centers.centers.data[y * d + j] - mean).abs() <= 1e-8,
                        "alpha {alpha} class {y} dim {j}"
                    );
                }
            }
        }
    }

    #[test]
    fn joint_loss_lambda_zero_equals_cross_entropy() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::from_dims(&[2, 3], vec![0.1, 0.2, 0.3, 1.0, -1.0, 0.0]).unwrap());
        let feats = tape.constant(Tensor::from_dims(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let centers = ClassCenters::zeros(3, 2);
        let labels = [2usize, 0];
        let cfg0 = LossConfig { lambda: 0.0, alpha: 0.9 };
        let l0 = joint_loss(&mut tape, logits, feats, &labels, &centers, &cfg0).unwrap();
        let ce = tape.softmax_cross_entropy(logits, &labels).unwrap();
        assert_eq!(tape.value(l0).data, tape.value(ce).data);

        // doubling lambda doubles the residual
        let cfg1 = LossConfig { lambda: 0.01, alpha: 0.9 };
        let cfg2 = LossConfig { lambda: 0.02, alpha: 0.9 };
        let l1 = joint_loss(&mut tape, logits, feats, &labels, &centers, &cfg1).unwrap();
        let l2 = joint_loss(&mut tape, logits, feats, &labels, &centers, &cfg2).unwrap();
        let base = tape.value(ce).scalar_value().unwrap();
        let r1 = tape.value(l1).scalar_value().unwrap() - base;
        let r2 = tape.value(l2).scalar_value().unwrap() - base;
        assert_abs_diff_eq!(r2, 2.0 * r1, epsilon = 1e-12);
    }

    #[test]
    fn joint_loss_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let logits = Tensor::from_dims(&[3, 4], (0..12).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let feats = Tensor::from_dims(&[3, 2], (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let mut centers = ClassCenters::zeros(4, 2);
        for v in &mut centers.centers.data {
            *v = rng.random_range(-1.0..1.0);
        }
        let labels = vec![0usize, 3, 1];
        let cfg = LossConfig::default();
        let report = grad_check_multi(
            &[logits, feats],
            move |tape, vars| joint_loss(tape, vars[0], vars[1], &labels, &centers, &cfg),
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.pass, "max_rel_error = {}", report.max_rel_error);
    }

    #[test]
    fn synthetic_dataset_deterministic_and_separable() {
        let a = generate_synthetic_faces(10, 3, 32, 0.1, false, 5);
        let b = generate_synthetic_faces(10, 3, 32, 0.1, false, 5);
        assert_eq!(a.images.data, b.images.data);
        assert_eq!(a.labels, b.labels);
        // noise=0 -> identical images within a class
        let clean = generate_synthetic_faces(2, 3, 16, 0.0, false, 5);
        let stride = 3 * 16 * 16;
        assert_eq!(&clean.images.data[0..stride], &clean.images.data[stride..2 * stride]);
        // nearest-prototype classifier is perfect at noise 0.1
        let protos: Vec<Vec<f64>> = (0..10).map(|c| prototype(c, 32, 5)).collect();
        let img_stride = 3 * 32 * 32;
        for (i, &label) in a.labels.iter().enumerate() {
            let img = &a.images.data[i * img_stride..(i + 1) * img_stride];
            let nearest = (0..10)
                .min_by(|&p, &q| {
                    let dp: f64 = protos[p].iter().zip(img).map(|(a, b)| (a - b) * (a - b)).sum();
                    let dq: f64 = protos[q].iter().zip(img).map(|(a, b)| (a - b) * (a - b)).sum();
                    dp.partial_cmp(&dq).unwrap()
                })
                .unwrap();
            assert_eq!(nearest, label);
        }
    }

    #[test]
    fn degraded_images_lose_high_frequency_energy() {
        let clean = generate_synthetic_faces(2, 2, 16, 0.1, false, 9);
        let degraded = generate_synthetic_faces(2, 2, 16, 0.1, true, 9);
        // total variation (sum of horizontal neighbor diffs) must shrink
        let tv = |data: &[f64]| -> f64 {
            data.chunks(16)
                .map(|row| row.windows(2).map(|w| (w[1] - w[0]).abs()).sum::<f64>())
                .sum()
        };
        assert!(tv(&degraded.images.data) < tv(&clean.images.data));
    }

    #[test]
    fn flip_reverses_rows() {
        let t = Tensor::from_dims(&[1, 1, 2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let f = flip_horizontal(&t);
        assert_eq!(f.data, vec![3.0, 2.0, 1.0, 6.0, 5.0, 4.0]);
        assert_eq!(flip_horizontal(&f).data, t.data);
    }

    fn micro_model() -> (Model, SyntheticDataset) {
        let cfg = ArchitectureConfig {
            growth_rate: 4,
            reduction: 2,
            block_layers: vec![1],
            se_placement: crate::blocks::SePlacement::BeforeInception,
            num_classes: 3,
            input_size: 16,
            input_channels: 3,
            composite: crate::blocks::Composite::BnReluConv,
            seed: 11,
        };
        let model = build_model(&cfg).unwrap();
        let data = generate_synthetic_faces(3, 4, 16, 0.05, false, 11);
        (model, data)
    }

    #[test]
    fn zero_lr_epoch_leaves_params_unchanged() {
        let (mut model, data) = micro_model();
        let before = model.params.clone();
        let cfg = TrainConfig {
            schedule: LrSchedule {
                base: 0.0,
                drop_epochs: vec![],
                factor: 0.1,
                stop_epoch: 1,
            },
            batch_size: 6,
            ..TrainConfig::default()
        };
        let mut opt = RmsPropState::new(&model.params);
        let mut centers = ClassCenters::zeros(3, model.cfg.feature_width());
        train_epoch(&mut model, &data, &mut opt, &mut centers, &cfg, 0).unwrap();
        for (name, t) in before.iter() {
            assert_eq!(t.data, model.params.get(name).unwrap().data, "param {name}");
        }
    }

    #[test]
    fn flip_doubles_samples_seen() {
        let (mut model, data) = micro_model();
        let mut cfg = TrainConfig {
            schedule: LrSchedule {
                base: 1e-4,
                drop_epochs: vec![],
                factor: 0.1,
                stop_epoch: 1,
            },
            batch_size: 6,
            ..TrainConfig::default()
        };
        let mut opt = RmsPropState::new(&model.params);
        let mut centers = ClassCenters::zeros(3, model.cfg.feature_width());
        let plain = train_epoch(&mut model, &data, &mut opt, &mut centers, &cfg, 0).unwrap();
        cfg.flip_augment = true;
        let (mut model2, _) = micro_model();
        let mut opt2 = RmsPropState::new(&model2.params);
        let mut centers2 = ClassCenters::zeros(3, model2.cfg.feature_width());
        let flipped = train_epoch(&mut model2, &data, &mut opt2, &mut centers2, &cfg, 0).unwrap();
        assert_eq!(flipped.samples_seen, 2 * plain.samples_seen);
    }

    #[test]
    fn loss_decreases_over_a_few_epochs() {
        let (mut model, data) = micro_model();
        let cfg = TrainConfig {
            schedule: LrSchedule {
                base: 1e-3,
                drop_epochs: vec![],
                factor: 0.1,
                stop_epoch: 5,
            },
            batch_size: 6,
            seed: 2,
            ..TrainConfig::default()
        };
        let mut opt = RmsPropState::new(&model.params);
        let mut centers = ClassCenters::zeros(3, model.cfg.feature_width());
        let logs = train_loop(&mut model, &data, &mut opt, &mut centers, &cfg, 0, |_| {}).unwrap();
        assert!(logs.last().unwrap().loss < logs[0].loss, "{logs:?}");
    }

    #[test]
    fn training_is_deterministic() {
        let run = || {
            let (mut model, data) = micro_model();
            let cfg = TrainConfig {
                schedule: LrSchedule {
                    base: 1e-3,
                    drop_epochs: vec![1],
                    factor: 0.1,
                    stop_epoch: 3,
                },
                batch_size: 5,
                seed: 4,
                ..TrainConfig::default()
            };
            let mut opt = RmsPropState::new(&model.params);
            let mut centers = ClassCenters::zeros(3, model.cfg.feature_width());
            let logs = train_loop(&mut model, &data, &mut opt, &mut centers, &cfg, 0, |_| {}).unwrap();
            (model, centers, logs)
        };
        let (m1, c1, l1) = run();
        let (m2, c2, l2) = run();
        assert_eq!(c1.centers.data, c2.centers.data);
        for (name, t) in m1.params.iter() {
            assert_eq!(t.data, m2.params.get(name).unwrap().data, "param {name}");
        }
        for (a, b) in l1.iter().zip(&l2) {
            assert_eq!(a.loss.to_bits(), b.loss.to_bits());
        }
    }

    #[test]
    fn intra_class_distance_zero_for_collapsed_classes() {
        let feats = Tensor::from_dims(&[4, 2], vec![1.0, 1.0, 1.0, 1.0, 5.0, 5.0, 5.0, 5.0]).unwrap();
        let d = mean_intra_class_distance(&feats, &[0, 0, 1, 1]);
        assert_abs_diff_eq!(d, 0.0, epsilon = 1e-15);
        let spread = Tensor::from_dims(&[2, 2], vec![0.0, 0.0, 2.0, 0.0]).unwrap();
        assert_abs_diff_eq!(mean_intra_class_distance(&spread, &[0, 0]), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn invalid_loss_config_rejected() {
        assert!(LossConfig { lambda: -0.1, alpha: 0.9 }.validate().is_err());
        assert!(LossConfig { lambda: 0.0, alpha: 0.0 }.validate().is_err());
        assert!(LossConfig { lambda: 0.0, alpha: 1.5 }.validate().is_err());
    }
}
