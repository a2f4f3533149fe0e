use rand::seq::SliceRandom;
use rand::Rng;

use super::{l2, sal_layer_target, SalProbeConfig};
use crate::diffcore::{Architecture, Dense, Layer, Model, Target, Tensor};
use crate::error::{Error, Result};
use crate::seed::rng_from;

/// Supervision for one head.
#[derive(Clone, Debug, PartialEq)]
pub enum Task {
    Classify { labels: Vec<usize>, n_classes: usize },
    Regress { targets: Tensor },
}

impl Task {
    pub fn target(&self) -> Target<'_> {
        match self {
            Task::Classify { labels, .. } => Target::Labels(labels),
            Task::Regress { targets } => Target::Values(targets),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Task::Classify { labels, .. } => labels.len(),
            Task::Regress { targets } => targets.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Task::Classify { n_classes, .. } => *n_classes,
            Task::Regress { targets } => targets.cols(),
        }
    }

    fn rows(&self, idx: &[usize]) -> Task {
        match self {
            Task::Classify { labels, n_classes } => Task::Classify {
                labels: idx.iter().map(|&i| labels[i]).collect(),
                n_classes: *n_classes,
            },
            Task::Regress { targets } => Task::Regress {
                targets: targets.select_rows(idx),
            },
        }
    }
}

/// Shared dense trunk with one linear head per task.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiTaskModel {
    pub trunk: Model,
    /// Each head is a single dense layer stored as a one-layer model.
    pub heads: Vec<Model>,
}

impl MultiTaskModel {
    /// Trunk `input -> hidden[0] -> ... ` with ReLU after every dense layer;
    /// one head per entry of `head_dims`.
    pub fn build<R: Rng + ?Sized>(
        input_dim: usize,
        hidden: &[usize],
        head_dims: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        if hidden.is_empty() || head_dims.is_empty() {
            return Err(Error::invalid("multi-task model needs a trunk layer and a head"));
        }
        let mut layers = Vec::new();
        let mut width = input_dim;
        for &h in hidden {
            layers.push(Layer::Dense(Dense::init(width, h, rng)));
            layers.push(Layer::Relu);
            width = h;
        }
        let trunk = Model::new(layers)?;
        let heads = head_dims
            .iter()
            .map(|&k| Architecture::linear(width, k).build(rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(MultiTaskModel { trunk, heads })
    }

    /// Trunk followed by head `k`; trunk layer indices are preserved.
    pub fn task_model(&self, k: usize) -> Result<Model> {
        let head = self
            .heads
            .get(k)
            .ok_or_else(|| Error::invalid(format!("no head {k}")))?;
        let mut layers = self.trunk.layers().to_vec();
        layers.extend_from_slice(head.layers());
        Model::new(layers)
    }

    pub fn trunk_layers(&self) -> Vec<usize> {
        self.trunk.dense_indices()
    }
}

/// Joint SGD on the summed task losses. Returns the model after each epoch.
pub fn train_multitask(
    model0: &MultiTaskModel,
    x: &Tensor,
    tasks: &[Task],
    epochs: usize,
    lr: f64,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<MultiTaskModel>> {
    check_tasks(model0, x, tasks)?;
    if batch_size == 0 || !(lr >= 0.0) {
        return Err(Error::invalid("need batch_size >= 1 and lr >= 0"));
    }
    let mut rng = rng_from(seed);
    let mut model = model0.clone();
    let mut order: Vec<usize> = (0..x.rows()).collect();
    let trunk_ids = model.trunk_layers();
    let head_id = model.trunk.layer_count();
    let mut out = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch_size) {
            let xb = x.select_rows(chunk);
            let mut trunk_grad: Vec<Vec<f64>> = trunk_ids
                .iter()
                .map(|&l| vec![0.0; model.trunk.dense(l).map_or(0, Dense::param_count)])
                .collect();
            let mut head_steps = Vec::with_capacity(tasks.len());
            for (k, task) in tasks.iter().enumerate() {
                let tb = task.rows(chunk);
                let lg = model.task_model(k)?.loss_and_grad(&xb, tb.target(), false)?;
                for (acc, &l) in trunk_grad.iter_mut().zip(&trunk_ids) {
                    let g = lg.grads.layer_flat(l).expect("trunk gradient");
                    acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
                let g = lg.grads.layer_flat(head_id).expect("head gradient");
                head_steps.push(g.into_iter().map(|v| -lr * v).collect::<Vec<_>>());
            }
            for (g, &l) in trunk_grad.iter().zip(&trunk_ids) {
                let step: Vec<f64> = g.iter().map(|v| -lr * v).collect();
                model.trunk.add_to_layer(l, &step)?;
            }
            for (head, step) in model.heads.iter_mut().zip(&head_steps) {
                head.add_to_layer(0, step)?;
            }
        }
        let finite = |m: &Model| m.flatten().iter().all(|v| v.is_finite());
        if !finite(&model.trunk) || !model.heads.iter().all(finite) {
            return Err(Error::NonFinite("multi-task parameters".into()));
        }
        out.push(model.clone());
    }
    Ok(out)
}

fn check_tasks(model: &MultiTaskModel, x: &Tensor, tasks: &[Task]) -> Result<()> {
    if tasks.len() != model.heads.len() {
        return Err(Error::invalid(format!(
            "{} tasks for {} heads",
            tasks.len(),
            model.heads.len()
        )));
    }
    for (k, t) in tasks.iter().enumerate() {
        if t.len() != x.rows() {
            return Err(Error::shape(format!(
                "task {k} has {} rows, inputs have {}",
                t.len(),
                x.rows()
            )));
        }
        if t.output_dim() != model.heads[k].output_dim() {
            return Err(Error::shape(format!("task {k} does not match its head width")));
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSimilarity {
    /// Tasks x tasks cosine similarities.
    pub matrix: Vec<Vec<f64>>,
    /// Per task, SAL of every trunk dense layer under that task's loss.
    pub sal: Vec<Vec<f64>>,
    /// Tasks whose SAL vector is all zeros; their off-diagonal entries are 0.
    pub zero_tasks: Vec<usize>,
}

/// Cosine similarity between the tasks' per-layer SAL vectors over the
/// shared trunk.
pub fn sal_task_similarity(
    model: &MultiTaskModel,
    x: &Tensor,
    tasks: &[Task],
    cfg: &SalProbeConfig,
) -> Result<TaskSimilarity> {
    check_tasks(model, x, tasks)?;
    let trunk_ids = model.trunk_layers();
    let mut sal = Vec::with_capacity(tasks.len());
    for (k, task) in tasks.iter().enumerate() {
        let m = model.task_model(k)?;
        let row = trunk_ids
            .iter()
            .map(|&l| sal_layer_target(&m, l, x, task.target(), cfg).map(|a| a.value))
            .collect::<Result<Vec<f64>>>()?;
        sal.push(row);
    }
    let norms: Vec<f64> = sal.iter().map(|v| l2(v)).collect();
    let zero_tasks: Vec<usize> = (0..tasks.len()).filter(|&k| norms[k] == 0.0).collect();
    let n = tasks.len();
    let mut matrix = vec![vec![0.0; n]; n];
    for a in 0..n {
        matrix[a][a] = 1.0;
        for b in a + 1..n {
            let c = if norms[a] == 0.0 || norms[b] == 0.0 {
                0.0
            } else {
                let dot: f64 = sal[a].iter().zip(&sal[b]).map(|(p, q)| p * q).sum();
                (dot / (norms[a] * norms[b])).clamp(-1.0, 1.0)
            };
            matrix[a][b] = c;
            matrix[b][a] = c;
        }
    }
    Ok(TaskSimilarity {
        matrix,
        sal,
        zero_tasks,
    })
}
