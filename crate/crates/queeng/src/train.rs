//! Sampling protocol, Adam with step decay, the transductive training
//! loop, checkpoint selection, and evaluation on the unlabeled remainder.

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::io::Cube;
use crate::metrics::{metrics, ConfusionCounts, Metrics};
use crate::pipeline::{forward, ModelConfig, ModelParams};
use crate::preprocess::{sam_map, slic, LdaModel, SuperpixelGraph};
use crate::qec::{one_hot_targets, qec_loss, QecMaps};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub decay: f64,
    pub decay_every: usize,
    pub max_epochs: usize,
    pub sample_rate: f64,
    pub slic_scale: usize,
    pub reps: usize,
    pub seed: u64,
    pub use_qfl: bool,
    pub use_qec: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 0.005,
            decay: 0.9,
            decay_every: 20,
            max_epochs: 250,
            sample_rate: 0.01,
            slic_scale: 20,
            reps: 1,
            seed: 0,
            use_qfl: true,
            use_qec: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::Config("lr0/decay out of range".into()));
        }
        if !(self.sample_rate > 0.0 && self.sample_rate <= 1.0) {
            return Err(Error::Config("sample_rate must be in (0, 1]".into()));
        }
        if self.max_epochs < 1 || self.decay_every < 1 || self.reps < 1 {
            return Err(Error::Config("epochs/decay_every/reps must be >= 1".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr0 * self.decay.powi((epoch / self.decay_every) as i32)
    }
}

/// Balanced 1% sampling with a per-class 9:1 train/val split. The per-class
/// quota is half the total budget, capped at the minority class size (the
/// cap is reported through the returned flag).
pub fn sample_labels(
    gt: &[u8],
    rate: f64,
    rng: &mut impl Rng,
) -> Result<(Vec<usize>, Vec<usize>, bool)> {
    let mut changed: Vec<usize> = Vec::new();
    let mut unchanged: Vec<usize> = Vec::new();
    for (p, &g) in gt.iter().enumerate() {
        if g != 0 {
            changed.push(p);
        } else {
            unchanged.push(p);
        }
    }
    if changed.is_empty() || unchanged.is_empty() {
        return Err(Error::SingleClassGt);
    }
    let total = ((rate * gt.len() as f64).floor() as usize).max(2);
    let per_class = (total / 2).max(1);
    let quota = per_class.min(changed.len()).min(unchanged.len());
    let capped = quota < per_class;
    changed.shuffle(rng);
    unchanged.shuffle(rng);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for class in [&changed, &unchanged] {
        let picks = &class[..quota];
        let n_train = ((picks.len() * 9) / 10).max(1).min(picks.len());
        train.extend_from_slice(&picks[..n_train]);
        val.extend_from_slice(&picks[n_train..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((train, val, capped))
}

/// Adam with bias correction; one state slot per parameter tensor.
pub struct Adam {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl Adam {
    pub fn new(params: &ModelParams) -> Adam {
        let fields = params.fields();
        Adam {
            m: fields.iter().map(|t| Tensor::zeros(t.shape())).collect(),
            v: fields.iter().map(|t| Tensor::zeros(t.shape())).collect(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &[Tensor], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for ((slot, g), (m, v)) in params
            .fields_mut()
            .into_iter()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for i in 0..g.len() {
                let gi = g.data()[i];
                let mi = ADAM_BETA1 * m.data()[i] + (1.0 - ADAM_BETA1) * gi;
                let vi = ADAM_BETA2 * v.data()[i] + (1.0 - ADAM_BETA2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                slot.data_mut()[i] -= lr * (mi / bc1) / ((vi / bc2).sqrt() + ADAM_EPS);
            }
        }
    }
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub val: Metrics,
}

pub struct TrainOutcome {
    pub params: ModelParams,
    pub lda: LdaModel,
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
    pub train_mask: Vec<usize>,
    pub val_mask: Vec<usize>,
    pub graph: SuperpixelGraph,
    pub test: Metrics,
}

fn confusion_on(m: &Tensor, gt: &[u8], pixels: &[usize]) -> ConfusionCounts {
    let mut c = ConfusionCounts::default();
    for &p in pixels {
        c.add(m.at(p, 1) > m.at(p, 0), gt[p] != 0);
    }
    c
}

/// Preprocessing shared by training and detection: SAM map plus the LDA
/// projection of the stacked pair, segmented into the superpixel graph.
pub fn build_graph(
    x1: &Tensor,
    x2: &Tensor,
    lda: &LdaModel,
    h: usize,
    w: usize,
    s: usize,
) -> Result<(Tensor, SuperpixelGraph)> {
    let (z, _) = sam_map(x1, x2)?;
    let stacked = stack_bands(x1, x2);
    let feature = lda.project(&stacked)?;
    let graph = slic(&feature, h, w, s)?;
    Ok((z, graph))
}

pub fn stack_bands(x1: &Tensor, x2: &Tensor) -> Tensor {
    let (n, c) = (x1.rows(), x1.cols());
    let mut out = Tensor::zeros(&[n, 2 * c]);
    for p in 0..n {
        out.data_mut()[p * 2 * c..p * 2 * c + c].copy_from_slice(&x1.data()[p * c..(p + 1) * c]);
        out.data_mut()[p * 2 * c + c..(p + 1) * 2 * c]
            .copy_from_slice(&x2.data()[p * c..(p + 1) * c]);
    }
    out
}

pub fn train(x1: &Cube, x2: &Cube, gt: &[u8], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (h, w) = (x1.height, x1.width);
    if x2.height != h || x2.width != w || x2.bands != x1.bands || gt.len() != h * w {
        return Err(Error::Dimension { op: "train", detail: "input shapes disagree".into() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (train_mask, val_mask, _) = sample_labels(gt, cfg.sample_rate, &mut rng)?;

    let stacked = stack_bands(&x1.data, &x2.data);
    let labeled: Vec<(usize, usize)> = train_mask
        .iter()
        .map(|&p| (p, usize::from(gt[p] != 0)))
        .collect();
    let lda = LdaModel::fit(&stacked, &labeled)?;
    let (z, graph) = build_graph(&x1.data, &x2.data, &lda, h, w, cfg.slic_scale)?;

    let model_cfg = ModelConfig {
        bands: x1.bands,
        height: h,
        width: w,
        reps: cfg.reps,
        use_qfl: cfg.use_qfl,
        use_qec: cfg.use_qec,
    };
    let mut params = ModelParams::init(model_cfg, &mut rng)?;
    let mut opt = Adam::new(&params);
    let targets = one_hot_targets(gt);

    let mut history = Vec::with_capacity(cfg.max_epochs);
    let mut best: Option<(f64, usize, ModelParams)> = None;
    for epoch in 0..cfg.max_epochs {
        let lr = cfg.lr_at(epoch);
        let mut tape = Tape::new();
        let (maps, vars) = forward(&mut tape, &mut params, &x1.data, &x2.data, &z, &graph, true)?;
        let total = if cfg.use_qec {
            let qmaps = QecMaps {
                m: maps.m,
                m_qnn: maps.m_qnn.expect("qec maps"),
                m_fcl: maps.m_fcl,
            };
            qec_loss(&mut tape, &qmaps, &targets, &train_mask)?.0
        } else {
            tape.cross_entropy_masked(maps.m_fcl, &targets, &train_mask)?
        };
        let loss = tape.value(total).item();
        if !loss.is_finite() {
            return Err(Error::Diverged { epoch, loss });
        }
        let grads = tape.backward(total)?;
        let grad_list: Vec<Tensor> = vars
            .ids()
            .iter()
            .zip(params.fields())
            .map(|(&id, t)| grads.get_or_zeros(id, t.shape()))
            .collect();

        let val = metrics(&confusion_on(tape.value(maps.m), gt, &val_mask));
        history.push(EpochStats { epoch, lr, loss, val });
        // Ties go to the later epoch: the validation set is tiny, so F1
        // saturates quickly and the later checkpoints are the converged ones.
        if best.as_ref().map_or(true, |(f1, ..)| val.f1 >= *f1) {
            best = Some((val.f1, epoch, params.clone()));
        }

        opt.step(&mut params, &grad_list, lr);
        // Keep the fusion date taps on the antisymmetric (difference-only)
        // subspace, and the second fusion conv pointwise; see
        // ff1_kernel_init and center_tap_project.
        crate::pipeline::tie_date_taps(&mut params.ff1_k);
        crate::pipeline::center_tap_project(&mut params.ff2_k, crate::pipeline::SPINE);
    }

    let (_, best_epoch, best_params) = best.expect("at least one epoch");
    let mut best_params = best_params;

    // Test metrics on the unlabeled remainder, eval-mode forward.
    let mut tape = Tape::new();
    let (maps, _) = forward(&mut tape, &mut best_params, &x1.data, &x2.data, &z, &graph, false)?;
    let mut in_mask = vec![false; h * w];
    for &p in train_mask.iter().chain(&val_mask) {
        in_mask[p] = true;
    }
    let test_pixels: Vec<usize> = (0..h * w).filter(|&p| !in_mask[p]).collect();
    let test = metrics(&confusion_on(tape.value(maps.m), gt, &test_pixels));

    Ok(TrainOutcome {
        params: best_params,
        lda,
        history,
        best_epoch,
        train_mask,
        val_mask,
        graph,
        test,
    })
}

/// Eval-mode change map for a trained model: 0/255 per pixel.
pub fn detect(params: &mut ModelParams, x1: &Cube, x2: &Cube, lda: &LdaModel, s: usize) -> Result<Vec<u8>> {
    let (h, w) = (params.cfg.height, params.cfg.width);
    if x1.height != h || x1.width != w || x1.bands != params.cfg.bands {
        return Err(Error::Dimension { op: "detect", detail: "cube/model shape mismatch".into() });
    }
    let (z, graph) = build_graph(&x1.data, &x2.data, lda, h, w, s)?;
    let mut tape = Tape::new();
    let (maps, _) = forward(&mut tape, params, &x1.data, &x2.data, &z, &graph, false)?;
    let m = tape.value(maps.m);
    Ok((0..h * w).map(|p| if m.at(p, 1) > m.at(p, 0) { 255 } else { 0 }).collect())
}

/// CSV rows for the metric history; format is pinned by the acceptance
/// determinism criterion (same seed => identical bytes).
pub fn history_csv(history: &[EpochStats]) -> String {
    let mut out = String::from("epoch,lr,loss,val_oa,val_kappa,val_f1,val_precision,val_recall\n");
    for e in history {
        out.push_str(&format!(
            "{},{:.12e},{:.12e},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            e.epoch, e.lr, e.loss, e.val.oa, e.val.kappa, e.val.f1, e.val.precision, e.val.recall
        ));
    }
    out
}
