//! The desk-scale classifier: token embedding, one or two MoE blocks, mean
//! pooling, and a linear head, with a canonical parameter ordering shared
//! by binding, gradients, updates, and checkpoints.

use moe_core::affinity::GateParams;
use moe_core::losses;
use moe_core::moe::{moe_layer_step, BoundExperts, BoundGate, ExpertBank, RouterKind};
use moe_core::rng::Rng;
use moe_core::tape::{Tape, Var};
use moe_core::tensor::Tensor;

use crate::config::ExperimentConfig;
use crate::HarnessError;

#[derive(Debug, Clone)]
pub struct MoeBlock {
    pub bank: ExpertBank,
    pub gate: GateParams,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub embed_w: Tensor,
    pub embed_b: Tensor,
    pub blocks: Vec<MoeBlock>,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

pub struct BoundModel<'t> {
    pub embed_w: Var<'t>,
    pub embed_b: Var<'t>,
    pub blocks: Vec<(BoundExperts<'t>, BoundGate<'t>)>,
    pub head_w: Var<'t>,
    pub head_b: Var<'t>,
}

impl Model {
    pub fn init(cfg: &ExperimentConfig, rng: &Rng) -> Result<Model, HarnessError> {
        let d = cfg.model.token_dim;
        let h = cfg.model.hidden_dim;
        let e = cfg.model.experts;
        let classes = cfg.data.classes;
        let scale = 1.0 / (d as f64).sqrt();

        let mut init_rng = rng.stream(10);
        let embed_w = init_rng.normal_tensor(&[d, d], scale)?;
        let embed_b = Tensor::zeros(&[d]);

        let mut blocks = Vec::new();
        for layer in 0..cfg.model.moe_layers {
            let mut block_rng = rng.stream(20 + layer as u64);
            let mut bank = ExpertBank::init(d, h, e, &mut block_rng)?;
            if matches!(cfg.router, RouterKind::SoftMoe { .. }) {
                bank = bank.with_slots(cfg.soft_slots()?, &mut block_rng)?;
            }
            let mut weights = block_rng.normal_tensor(&[d, e], scale)?;
            if cfg.gate_skew != 0.0 {
                for row in 0..d {
                    let v = weights.at2(row, 0);
                    weights.set2(row, 0, v + cfg.gate_skew);
                }
            }
            let gate = GateParams::new(weights, cfg.gate_noise_stddev)?;
            blocks.push(MoeBlock { bank, gate });
        }

        let mut head_rng = rng.stream(40);
        let head_w = head_rng.normal_tensor(&[d, classes], scale)?;
        let head_b = Tensor::zeros(&[classes]);
        Ok(Model {
            embed_w,
            embed_b,
            blocks,
            head_w,
            head_b,
        })
    }

    /// Canonical parameter order; gradients and updates use the same walk.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("embed_w".into(), &self.embed_w),
            ("embed_b".into(), &self.embed_b),
        ];
        for (i, block) in self.blocks.iter().enumerate() {
            out.push((format!("block{i}_gate"), &block.gate.weights));
            for r in 0..block.bank.experts() {
                out.push((format!("block{i}_expert{r}_w1"), &block.bank.w1[r]));
                out.push((format!("block{i}_expert{r}_b1"), &block.bank.b1[r]));
                out.push((format!("block{i}_expert{r}_w2"), &block.bank.w2[r]));
                out.push((format!("block{i}_expert{r}_b2"), &block.bank.b2[r]));
            }
            if let Some(slots) = &block.bank.slots {
                out.push((format!("block{i}_slots"), slots));
            }
        }
        out.push(("head_w".into(), &self.head_w));
        out.push(("head_b".into(), &self.head_b));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![&mut self.embed_w, &mut self.embed_b];
        for block in self.blocks.iter_mut() {
            out.push(&mut block.gate.weights);
            let bank = &mut block.bank;
            let experts = bank.w1.len();
            let w1 = bank.w1.iter_mut();
            let b1 = bank.b1.iter_mut();
            let w2 = bank.w2.iter_mut();
            let b2 = bank.b2.iter_mut();
            let mut zipped: Vec<(
                &mut Tensor,
                (&mut Tensor, (&mut Tensor, &mut Tensor)),
            )> = w1.zip(b1.zip(w2.zip(b2))).collect();
            debug_assert_eq!(zipped.len(), experts);
            for (w1r, (b1r, (w2r, b2r))) in zipped.drain(..) {
                out.push(w1r);
                out.push(b1r);
                out.push(w2r);
                out.push(b2r);
            }
            if let Some(slots) = bank.slots.as_mut() {
                out.push(slots);
            }
        }
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundModel<'t> {
        let embed_w = tape.param(self.embed_w.clone());
        let embed_b = tape.param(self.embed_b.clone());
        let blocks = self
            .blocks
            .iter()
            .map(|b| (b.bank.bind(tape), b.gate.bind(tape)))
            .collect();
        let head_w = tape.param(self.head_w.clone());
        let head_b = tape.param(self.head_b.clone());
        BoundModel {
            embed_w,
            embed_b,
            blocks,
            head_w,
            head_b,
        }
    }
}

impl<'t> BoundModel<'t> {
    /// Vars in the canonical parameter order.
    pub fn vars(&self) -> Vec<Var<'t>> {
        let mut out = vec![self.embed_w, self.embed_b];
        for (experts, gate) in &self.blocks {
            out.push(gate.weights);
            for r in 0..experts.experts() {
                out.push(experts.w1[r]);
                out.push(experts.b1[r]);
                out.push(experts.w2[r]);
                out.push(experts.b2[r]);
            }
            if let Some(slots) = experts.slots {
                out.push(slots);
            }
        }
        out.push(self.head_w);
        out.push(self.head_b);
        out
    }
}

/// Everything one optimization step needs from the forward pass.
pub struct BatchOutput<'t> {
    pub total_loss: Var<'t>,
    pub task_loss: f64,
    pub aux_importance: f64,
    pub aux_load: f64,
    pub batch_accuracy: f64,
    pub report: moe_core::allocation::RoutingReport,
}

/// Forward a batch of images. Hard routers flatten the batch into one
/// routing group; soft routing treats every image as its own group.
pub fn forward_batch<'t>(
    tape: &'t Tape,
    model: &BoundModel<'t>,
    cfg: &ExperimentConfig,
    images: &[&Tensor],
    labels: &[usize],
    rng: &mut Rng,
    training: bool,
) -> Result<BatchOutput<'t>, HarnessError> {
    if matches!(cfg.router, RouterKind::SoftMoe { .. }) {
        forward_soft(tape, model, cfg, images, labels, rng, training)
    } else {
        forward_hard(tape, model, cfg, images, labels, rng, training)
    }
}

struct BlockPass<'t> {
    output: Var<'t>,
    aux_importance: Var<'t>,
    aux_load: Var<'t>,
    report: Option<moe_core::allocation::RoutingReport>,
}

/// Run the MoE blocks on one routing group, attaching balancing losses to
/// noisy-softmax token-choice gates only.
fn run_blocks<'t>(
    tape: &'t Tape,
    model: &BoundModel<'t>,
    cfg: &ExperimentConfig,
    tokens: Var<'t>,
    rng: &mut Rng,
    training: bool,
) -> Result<BlockPass<'t>, HarnessError> {
    let mut h = tokens;
    let mut aux_importance = tape.scalar(0.0);
    let mut aux_load = tape.scalar(0.0);
    let mut report = None;
    let attach_aux = matches!(cfg.router, RouterKind::SoftmaxTokenChoice { .. })
        && (cfg.aux.importance_weight > 0.0 || cfg.aux.load_weight > 0.0);
    for (experts, gate) in &model.blocks {
        let input = h;
        let out = moe_layer_step(input, experts, gate, &cfg.router, rng, training)?;
        if attach_aux {
            let noise = match &out.noise {
                Some(eps) => eps.clone(),
                None => Tensor::zeros(&input.shape()),
            };
            let imp = losses::importance_loss(input, gate.weights)?
                .scale(cfg.aux.importance_weight)?;
            let load = losses::load_loss(input, gate.weights, &noise, cfg.aux.k)?
                .scale(cfg.aux.load_weight)?;
            aux_importance = aux_importance.add(imp)?;
            aux_load = aux_load.add(load)?;
        }
        if report.is_none() {
            report = Some(out.report.clone());
        }
        h = out.y;
    }
    Ok(BlockPass {
        output: h,
        aux_importance,
        aux_load,
        report,
    })
}

fn embed<'t>(model: &BoundModel<'t>, x: Var<'t>) -> Result<Var<'t>, HarnessError> {
    Ok(x.matmul(model.embed_w)?.add_row(model.embed_b)?)
}

fn cross_entropy<'t>(logits: Var<'t>, labels: &[usize]) -> Result<Var<'t>, HarnessError> {
    let log_probs = logits.softmax_rows()?.ln()?;
    let picked = log_probs.select_per_row(labels)?;
    Ok(picked.sum_all()?.scale(-1.0 / labels.len() as f64)?)
}

fn accuracy_from_logits(logits: &Tensor, labels: &[usize]) -> f64 {
    let predictions = logits.argmax_rows().expect("logits are a matrix");
    let correct = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    correct as f64 / labels.len() as f64
}

fn forward_hard<'t>(
    tape: &'t Tape,
    model: &BoundModel<'t>,
    cfg: &ExperimentConfig,
    images: &[&Tensor],
    labels: &[usize],
    rng: &mut Rng,
    training: bool,
) -> Result<BatchOutput<'t>, HarnessError> {
    let batch = images.len();
    let t = cfg.data.tokens_per_image;
    let d = cfg.model.token_dim;
    let mut data = Vec::with_capacity(batch * t * d);
    for img in images {
        data.extend_from_slice(img.data());
    }
    let x = tape.constant(Tensor::new(vec![batch * t, d], data)?);
    let h = embed(model, x)?;
    let pass = run_blocks(tape, model, cfg, h, rng, training)?;

    // block-diagonal mean pooling over each image's rows
    let mut pool = Tensor::zeros(&[batch, batch * t]);
    for (i, row) in (0..batch).map(|i| (i, i * t)) {
        for c in 0..t {
            pool.set2(i, row + c, 1.0 / t as f64);
        }
    }
    let pooled = tape.constant(pool).matmul(pass.output)?;
    let logits = pooled.matmul(model.head_w)?.add_row(model.head_b)?;
    let task = cross_entropy(logits, labels)?;
    let total = task.add(pass.aux_importance)?.add(pass.aux_load)?;
    Ok(BatchOutput {
        total_loss: total,
        task_loss: task.scalar_value()?,
        aux_importance: pass.aux_importance.scalar_value()?,
        aux_load: pass.aux_load.scalar_value()?,
        batch_accuracy: accuracy_from_logits(&logits.value(), labels),
        report: pass.report.expect("at least one block"),
    })
}

fn forward_soft<'t>(
    tape: &'t Tape,
    model: &BoundModel<'t>,
    cfg: &ExperimentConfig,
    images: &[&Tensor],
    labels: &[usize],
    rng: &mut Rng,
    training: bool,
) -> Result<BatchOutput<'t>, HarnessError> {
    let t = cfg.data.tokens_per_image;
    let mut total: Option<Var<'t>> = None;
    let mut report = None;
    let mut correct = 0usize;
    for (img, &label) in images.iter().zip(labels) {
        let x = tape.constant((*img).clone());
        let h = embed(model, x)?;
        let pass = run_blocks(tape, model, cfg, h, rng, training)?;
        let pool = tape.constant(Tensor::filled(&[1, t], 1.0 / t as f64));
        let pooled = pool.matmul(pass.output)?;
        let logits = pooled.matmul(model.head_w)?.add_row(model.head_b)?;
        let loss = cross_entropy(logits, &[label])?;
        total = Some(match total {
            Some(acc) => acc.add(loss)?,
            None => loss,
        });
        if report.is_none() {
            report = pass.report;
        }
        if accuracy_from_logits(&logits.value(), &[label]) > 0.5 {
            correct += 1;
        }
    }
    let task = total
        .expect("non-empty batch")
        .scale(1.0 / images.len() as f64)?;
    Ok(BatchOutput {
        total_loss: task,
        task_loss: task.scalar_value()?,
        aux_importance: 0.0,
        aux_load: 0.0,
        batch_accuracy: correct as f64 / images.len() as f64,
        report: report.expect("at least one block"),
    })
}
