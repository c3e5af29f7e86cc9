//! Training loop, evaluation, checkpoints and packed-model export.

mod checkpoint;
pub mod codec;
mod export;
mod gradcheck;
mod optim;

use std::fmt::Write as _;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use export::{
    encode, export_packed, inventory, load_packed, read_packed, write_packed, BlockInfo, PackedFile, PACKED_MAGIC,
    PACKED_VERSION,
};
pub use gradcheck::{gradcheck_model, ModelGradcheck, DEFAULT_TOLERANCE};
pub use optim::{Algorithm, OptimConfig, Optimizer, Schedule};

use crate::autograd::Graph;
use crate::data::{batches, derive_seed, AugmentConfig, BatchPlan, Dataset, Normalization};
use crate::error::{Error, Result};
use crate::models::{ForwardPath, LayerStats, Model, PackedNet};
use crate::tensor::{softmax_cross_entropy, BnMode, Tensor};

/// Images used for the per-epoch sign statistics.
pub const PROBE_SIZE: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalResult {
    pub accuracy: f64,
    /// Mean cross-entropy.
    pub loss: f64,
    pub correct: usize,
    pub total: usize,
}

impl EvalResult {
    /// Accuracy in percent with one decimal.
    pub fn percent(&self) -> String {
        format!("{:.1}", 100.0 * self.accuracy)
    }
}

/// Summed loss and correct count for a batch of logits.
fn score(logits: &Tensor<f32>, labels: &[usize]) -> Result<(f64, usize)> {
    let (loss, _) = softmax_cross_entropy(logits, labels)?;
    let [_, classes] = logits.dims2()?;
    let correct = logits
        .data()
        .chunks(classes)
        .zip(labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count();
    Ok((loss as f64 * labels.len() as f64, correct))
}

/// First index of the maximum.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn eval_with(
    data: &Dataset,
    norm: &Normalization,
    batch_size: usize,
    mut forward: impl FnMut(Tensor<f32>) -> Result<Tensor<f32>>,
) -> Result<EvalResult> {
    if data.is_empty() {
        return Err(Error::shape("evaluation on an empty split"));
    }
    let (mut loss, mut correct) = (0.0, 0);
    for b in batches(data, norm, BatchPlan::eval(batch_size))? {
        let b = b?;
        let logits = forward(b.images)?;
        let (l, c) = score(&logits, &b.labels)?;
        loss += l;
        correct += c;
    }
    let total = data.len();
    Ok(EvalResult { accuracy: correct as f64 / total as f64, loss: loss / total as f64, correct, total })
}

/// Top-1 accuracy and mean loss over the whole split, in eval mode.
pub fn evaluate(
    model: &mut Model<f32>,
    data: &Dataset,
    norm: &Normalization,
    path: ForwardPath,
    batch_size: usize,
) -> Result<EvalResult> {
    match path {
        ForwardPath::Surrogate => eval_with(data, norm, batch_size, |x| model.forward(x, BnMode::Eval, path)),
        ForwardPath::Packed => evaluate_packed(&PackedNet::from_model(model)?, data, norm, batch_size),
    }
}

pub fn evaluate_packed(net: &PackedNet, data: &Dataset, norm: &Normalization, batch_size: usize) -> Result<EvalResult> {
    eval_with(data, norm, batch_size, |x| net.forward(&x))
}

/// One epoch of the metric log.
#[derive(Clone, Debug)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub test: Option<EvalResult>,
    pub stats: Vec<LayerStats>,
}

impl EpochMetrics {
    /// Line-oriented `key=value` records: one summary line, then one line
    /// per probed tensor.
    pub fn to_lines(&self) -> Vec<String> {
        let mut head = format!(
            "epoch={} lr={} train_loss={} train_acc={}",
            self.epoch, self.lr, self.train_loss, self.train_accuracy
        );
        if let Some(t) = &self.test {
            let _ = write!(head, " test_loss={} test_acc={}", t.loss, t.accuracy);
        }
        let mut lines = vec![head];
        lines.extend(self.stats.iter().map(|s| format!("epoch={} {}", self.epoch, s.to_line())));
        lines
    }
}

/// Everything besides the model that a resumed run needs.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: u64,
    pub optimizer: Optimizer,
    pub log: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model<f32>,
    pub cfg: OptimConfig,
    pub augment: AugmentConfig,
    pub norm: Normalization,
    pub state: TrainState,
}

const SHUFFLE_STREAM: u64 = 0x5348_5546;
const AUGMENT_STREAM: u64 = 0x4155_474d;

impl Trainer {
    pub fn new(model: Model<f32>, cfg: OptimConfig, augment: AugmentConfig, norm: Normalization) -> Result<Self> {
        cfg.validate()?;
        let optimizer = Optimizer::new(&cfg, &model.params);
        Ok(Trainer { model, cfg, augment, norm, state: TrainState { epoch: 0, step: 0, optimizer, log: Vec::new() } })
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.cfg.batch_size)
    }

    /// One pass over `train`. Returns mean loss, accuracy and the last lr.
    pub fn train_epoch(&mut self, train: &Dataset) -> Result<(f64, f64, f64)> {
        if train.is_empty() {
            return Err(Error::shape("training on an empty split"));
        }
        let epoch = self.state.epoch;
        let total_steps = self.steps_per_epoch(train.len()) * self.cfg.epochs;
        let plan = BatchPlan {
            batch_size: self.cfg.batch_size,
            shuffle_seed: Some(derive_seed(self.cfg.seed ^ SHUFFLE_STREAM, epoch, 0)),
            augment: self.augment,
            augment_seed: self.cfg.seed ^ AUGMENT_STREAM,
            epoch,
        };
        let (mut loss_sum, mut correct, mut lr) = (0.0, 0usize, self.cfg.lr);
        let norm = self.norm.clone();
        for b in batches(train, &norm, plan)? {
            let b = b?;
            lr = self.cfg.lr_at(epoch, self.state.step as usize, total_steps);
            let mut g = Graph::new();
            let logits = self.model.forward_graph(&mut g, b.images.clone(), BnMode::Train)?;
            let loss = g.softmax_cross_entropy(logits, &b.labels)?;
            let lv = g.value(loss).data()[0];
            if !lv.is_finite() {
                return Err(self.non_finite(b.images, b.step));
            }
            let (l, c) = score(g.value(logits), &b.labels)?;
            loss_sum += l;
            correct += c;
            self.model.params.zero_grad();
            g.backward(loss, &mut self.model.params)?;
            self.state.optimizer.step(&self.cfg, &mut self.model.params, lr)?;
            self.state.step += 1;
        }
        let n = train.len() as f64;
        Ok((loss_sum / n, correct as f64 / n, lr))
    }

    fn non_finite(&mut self, images: Tensor<f32>, step: usize) -> Error {
        let diagnostics = match self.model.sign_stats(images, BnMode::Eval) {
            Ok(stats) => stats.iter().map(LayerStats::to_line).collect::<Vec<_>>().join("\n"),
            Err(e) => format!("sign statistics unavailable: {e}"),
        };
        Error::NonFinite { epoch: self.state.epoch, step, diagnostics }
    }

    /// Sign statistics of the first [`PROBE_SIZE`] items of `data`.
    pub fn probe_stats(&mut self, data: &Dataset) -> Result<Vec<LayerStats>> {
        let idx: Vec<usize> = (0..data.len().min(PROBE_SIZE)).collect();
        let x = self.norm.apply(&data.gather(&idx))?;
        self.model.sign_stats(x, BnMode::Eval)
    }

    /// Trains until `until` epochs are complete (at most `cfg.epochs`),
    /// calling `after_epoch` once per finished epoch.
    pub fn run(
        &mut self,
        train: &Dataset,
        test: Option<&Dataset>,
        until: usize,
        mut after_epoch: impl FnMut(&Trainer, &EpochMetrics) -> Result<()>,
    ) -> Result<()> {
        let until = until.min(self.cfg.epochs);
        while self.state.epoch < until {
            let (train_loss, train_accuracy, lr) = self.train_epoch(train)?;
            let test_result = match test {
                Some(t) => Some(evaluate(&mut self.model, t, &self.norm.clone(), ForwardPath::Surrogate, 256)?),
                None => None,
            };
            let stats = self.probe_stats(test.unwrap_or(train))?;
            let m = EpochMetrics {
                epoch: self.state.epoch + 1,
                lr,
                train_loss,
                train_accuracy,
                test: test_result,
                stats,
            };
            self.state.log.extend(m.to_lines());
            self.state.epoch += 1;
            after_epoch(self, &m)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{DatasetKind, Split};
    use crate::models::{ModelSpec, PresetOptions};
    use sha2::{Digest, Sha256};

    /// Two-class toy problem on MNIST-shaped images: bright top half vs
    /// bright bottom half.
    pub(crate) fn toy_data(n: usize, seed: u64) -> Dataset {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut pixels = Vec::with_capacity(n * 784);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let label = (i % 2) as u8;
            for y in 0..28 {
                for _ in 0..28 {
                    let lit = (y < 14) == (label == 0);
                    pixels.push(if lit { rng.gen_range(120..=255) } else { rng.gen_range(0..80) });
                }
            }
            labels.push(label);
        }
        Dataset::from_raw(DatasetKind::Mnist, Split::Train, pixels, labels).unwrap()
    }

    fn tiny_spec() -> ModelSpec {
        ModelSpec::parse(
            "model name=tiny input=1x28x28 classes=10\n\
             conv name=c1 in=1 out=4 k=3 s=2 p=1 bias=false\n\
             bn name=b1 c=4\n\
             bconv name=bc1 in=4 out=4 k=3 s=2 p=1 asd=sigmoid wsd=on scale=off ste=clip\n\
             bn name=b2 c=4\n\
             maxpool name=p1 k=2 s=2\n\
             flatten name=f\n\
             linear name=fc in=36 out=10 bias=true\n",
        )
        .unwrap()
    }

    fn trainer(seed: u64) -> (Trainer, Dataset) {
        let data = toy_data(48, seed);
        let norm = Normalization::compute(&data).unwrap();
        let cfg = OptimConfig { epochs: 3, batch_size: 16, lr: 0.01, seed, ..OptimConfig::default() };
        let model = Model::build(&tiny_spec(), seed).unwrap();
        (Trainer::new(model, cfg, AugmentConfig::NONE, norm).unwrap(), data)
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let run = || {
            let (mut t, data) = trainer(1);
            t.run(&data, Some(&data), 3, |_, _| Ok(())).unwrap();
            t
        };
        let a = run();
        let b = run();
        assert_eq!(a.state.log, b.state.log);
        assert_eq!(a.model.params, b.model.params);
        let first: f64 = a.state.log[0].split_whitespace().find_map(|t| t.strip_prefix("train_loss=")).unwrap().parse().unwrap();
        let last = a.state.log.iter().rev().find(|l| l.contains("train_loss")).unwrap();
        let last: f64 = last.split_whitespace().find_map(|t| t.strip_prefix("train_loss=")).unwrap().parse().unwrap();
        assert!(last < first, "{first} -> {last}");
        assert_eq!(a.state.step, 9);
        assert!(a.state.log.iter().any(|l| l.contains("layer=bc1 tensor=activation")));
    }

    #[test]
    fn forward_leaves_latent_weights_untouched() {
        let (mut t, data) = trainer(2);
        let digest = |m: &Model<f32>| {
            let mut h = Sha256::new();
            for (_, p) in m.params.iter() {
                for v in p.value.data() {
                    h.update(v.to_le_bytes());
                }
            }
            h.finalize()
        };
        let before = digest(&t.model);
        let x = t.norm.apply(&data.gather(&[0, 1, 2])).unwrap();
        let mut g = Graph::new();
        t.model.forward_graph(&mut g, x.clone(), BnMode::Train).unwrap();
        t.model.forward(x, BnMode::Eval, ForwardPath::Packed).unwrap();
        assert_eq!(digest(&t.model), before);
    }

    #[test]
    fn surrogate_and_packed_evaluation_agree() {
        let (mut t, data) = trainer(3);
        t.run(&data, None, 1, |_, _| Ok(())).unwrap();
        let norm = t.norm.clone();
        let s = evaluate(&mut t.model, &data, &norm, ForwardPath::Surrogate, 7).unwrap();
        let p = evaluate(&mut t.model, &data, &norm, ForwardPath::Packed, 7).unwrap();
        assert_eq!(s, p);
        let empty = data.truncated(0);
        assert!(evaluate(&mut t.model, &empty, &norm, ForwardPath::Surrogate, 7).is_err());
    }

    #[test]
    fn untrained_model_is_near_chance() {
        let spec = ModelSpec::preset("lenet", &PresetOptions::default()).unwrap();
        let mut model = Model::build(&spec, 0).unwrap();
        let data = toy_data(400, 4);
        let norm = Normalization::compute(&data).unwrap();
        // two balanced classes out of ten logits: chance is bounded by 0.5
        let r = evaluate(&mut model, &data, &norm, ForwardPath::Surrogate, 100).unwrap();
        assert!(r.accuracy <= 0.5 + 3.0 * (0.25f64 / 400.0).sqrt(), "{}", r.accuracy);
        assert_eq!(r.total, 400);
    }

    #[test]
    fn nan_loss_aborts_with_sign_stats() {
        let (mut t, data) = trainer(5);
        let id = t.model.params.find("fc.bias").unwrap();
        t.model.params.get_mut(id).value.data_mut()[0] = f32::NAN;
        match t.train_epoch(&data) {
            Err(Error::NonFinite { epoch: 0, step: 0, diagnostics }) => {
                assert!(diagnostics.contains("layer=bc1"), "{diagnostics}");
            }
            other => panic!("expected a non-finite abort, got {other:?}"),
        }
    }
}
