//! Training loop and held-out evaluation.

use std::path::Path;

use rand::seq::IndexedRandom;

use crate::autograd::Tape;
use crate::config::Config;
use crate::data::{stream, SyntheticPairSet, BATCH_STREAM};
use crate::error::{Error, Result};
use crate::metrics::{report, RetrievalReport};
use crate::model::Model;
use crate::params::Sgd;
use crate::retrieval::{info_nce_on_tape, stack, Embedding, SimilarityMatrix};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    /// Loss of the batch seen at each step, measured before that step's update.
    pub losses: Vec<f64>,
}

/// Contrastive loss of `model` on the pairs `batch`, recorded on `tape`.
pub fn batch_loss(model: &Model, tape: &mut Tape, data: &SyntheticPairSet, batch: &[usize]) -> Result<(crate::Var, crate::params::Bindings)> {
    let binds = model.store.bind(tape);
    let videos: Vec<&Tensor> = batch.iter().map(|&i| &data.videos[i]).collect();
    let v = model.encode_batch(tape, &binds, &videos)?;
    let texts: Vec<Embedding> = batch.iter().map(|&i| data.texts[i].clone()).collect();
    let t = tape.constant(stack(&texts)?);
    let tt = tape.transpose(t)?;
    let sim = tape.matmul(v, tt)?;
    let inv_tau = model.temperature.inv_on_tape(tape, &binds);
    let truth: Vec<usize> = (0..batch.len()).collect();
    let loss = info_nce_on_tape(tape, sim, &truth, inv_tau, model.cfg.symmetric_loss)?;
    Ok((loss, binds))
}

fn dump_batch(dir: &Path, step: usize, data: &SyntheticPairSet, batch: &[usize]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut shape = vec![batch.len()];
    shape.extend_from_slice(data.videos[batch[0]].shape());
    let videos = Tensor::new(shape, batch.iter().flat_map(|&i| data.videos[i].data().to_vec()).collect())?;
    videos.save(dir.join("videos.bin"))?;
    let texts: Vec<Embedding> = batch.iter().map(|&i| data.texts[i].clone()).collect();
    stack(&texts)?.save(dir.join("texts.bin"))?;
    let info = serde_json::json!({ "step": step, "indices": batch });
    std::fs::write(dir.join("batch.json"), serde_json::to_string_pretty(&info)?)?;
    Ok(())
}

/// Minibatch SGD on the training split. A non-finite loss aborts the run;
/// when `dump` is set the offending batch is written there first.
pub fn train(cfg: &Config, data: &SyntheticPairSet, dump: Option<&Path>) -> Result<TrainOutcome> {
    train_with(cfg, data, dump, |_, _| {})
}

/// [`train`], calling `on_step(step, loss)` after every update.
pub fn train_with(
    cfg: &Config,
    data: &SyntheticPairSet,
    dump: Option<&Path>,
    mut on_step: impl FnMut(usize, f64),
) -> Result<TrainOutcome> {
    let mut model = Model::init(cfg)?;
    let mut opt = Sgd::new(cfg.lr, cfg.momentum).with_group_scale(&model.store, cfg.stack_lr_mult, &[model.temperature.log_tau]);
    if cfg.grad_clip > 0.0 {
        opt = opt.with_clip(cfg.grad_clip);
    }
    let mut rng = stream(cfg.seed, BATCH_STREAM);
    let pool: Vec<usize> = data.train.clone().collect();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch: Vec<usize> = pool.choose_multiple(&mut rng, cfg.batch_size).copied().collect();
        let mut tape = Tape::new();
        let (loss, binds) = batch_loss(&model, &mut tape, data, &batch)?;
        let value = tape.value(loss).data()[0];
        if !value.is_finite() {
            if let Some(dir) = dump {
                dump_batch(dir, step, data, &batch)?;
            }
            return Err(Error::NonFiniteLoss { step, batch });
        }
        losses.push(value);
        let grads = tape.backward(loss)?;
        drop(tape);
        opt.step(&mut model.store, &binds, &grads);
        model.temperature.clamp(&mut model.store);
        on_step(step, value);
    }
    Ok(TrainOutcome { model, losses })
}

/// Similarity matrix of the test split (videos as rows, paired texts on the diagonal).
pub fn test_similarity(model: &Model, data: &SyntheticPairSet) -> Result<SimilarityMatrix> {
    let videos = data.test.clone().map(|i| model.embed(&data.videos[i])).collect::<Result<Vec<_>>>()?;
    SimilarityMatrix::from_embeddings(&videos, &data.texts[data.test.clone()])
}

pub fn eval(model: &Model, data: &SyntheticPairSet) -> Result<RetrievalReport> {
    report(&test_similarity(model, data)?)
}
