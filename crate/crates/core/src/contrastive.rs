//! Momentum contrast over RoI-pooled region embeddings: the memory queue of
//! negatives, InfoNCE with its gradient, the EMA key encoder and the full
//! per-step loss for both architectures.

use rand::Rng;

use crate::boxes::{augment_bbox, BBox};
use crate::error::{Error, Result};
use crate::nn::{l2_normalize, l2_normalize_backward, Backbone, Module, Param};
use crate::roialign::{roi_align_batch, roi_align_batch_backward, RoiSpec};
use crate::tensor::{gemm, Scalar, Tensor, Trans};

/// Largest tolerated deviation of a row norm from 1.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-3;

/// Samples per bin axis used whenever region features are pooled.
pub const ROI_SAMPLES: usize = 2;

/// Fixed-capacity FIFO ring of unit-norm key embeddings.
///
/// Rows `0..filled` are live. Writes start at `cursor` and wrap, so once the
/// ring is full every enqueue overwrites the oldest rows.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryQueue<T = f32> {
    capacity: usize,
    dim: usize,
    storage: Vec<T>,
    cursor: usize,
    filled: usize,
}

impl<T: Scalar> MemoryQueue<T> {
    /// Empty queue that grows until full.
    pub fn empty(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(Error::InvalidArgument(format!(
                "queue capacity {capacity} and dim {dim} must be positive"
            )));
        }
        Ok(MemoryQueue {
            capacity,
            dim,
            storage: vec![T::zero(); capacity * dim],
            cursor: 0,
            filled: 0,
        })
    }

    /// Full queue of random unit vectors (normalized Gaussians).
    pub fn random<R: Rng>(capacity: usize, dim: usize, rng: &mut R) -> Result<Self> {
        let mut q = Self::empty(capacity, dim)?;
        for row in q.storage.chunks_mut(dim) {
            let v: Vec<f64> = (0..dim).map(|_| standard_normal(rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            for (dst, x) in row.iter_mut().zip(v) {
                *dst = T::from_f64(x / norm);
            }
        }
        q.filled = capacity;
        Ok(q)
    }

    /// Rebuilds a queue from saved state.
    pub fn from_parts(capacity: usize, dim: usize, storage: Vec<T>, cursor: usize, filled: usize) -> Result<Self> {
        if storage.len() != capacity * dim || cursor >= capacity.max(1) || filled > capacity {
            return Err(Error::InvalidArgument(format!(
                "queue state: capacity {capacity}, dim {dim}, {} values, cursor {cursor}, filled {filled}",
                storage.len()
            )));
        }
        let mut q = Self::empty(capacity, dim)?;
        q.storage = storage;
        q.cursor = cursor;
        q.filled = filled;
        Ok(q)
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn filled(&self) -> usize {
        self.filled
    }

    /// Whole ring including unfilled rows, `capacity × dim`.
    pub fn storage(&self) -> &[T] {
        &self.storage
    }

    /// Live rows, `filled × dim`.
    pub fn negatives(&self) -> &[T] {
        &self.storage[..self.filled * self.dim]
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.storage[i * self.dim..(i + 1) * self.dim]
    }

    /// Writes `keys` (`[b, D]`, unit rows) at the cursor, evicting the
    /// oldest entries once full.
    pub fn enqueue(&mut self, keys: &Tensor<T>) -> Result<()> {
        if keys.rank() != 2 || keys.dim(1) != self.dim {
            return Err(Error::shape("enqueue", keys.shape(), &[keys.dim(0), self.dim]));
        }
        let b = keys.dim(0);
        if b > self.capacity {
            return Err(Error::InvalidArgument(format!(
                "cannot enqueue {b} keys into a queue of capacity {}",
                self.capacity
            )));
        }
        check_unit_rows("enqueue", keys)?;
        for row in 0..b {
            let dst = self.cursor * self.dim;
            self.storage[dst..dst + self.dim].copy_from_slice(keys.outer(row));
            self.cursor = (self.cursor + 1) % self.capacity;
        }
        self.filled = (self.filled + b).min(self.capacity);
        Ok(())
    }
}

fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    // Box-Muller; 1 - u keeps the log argument in (0, 1].
    let u: f64 = rng.gen();
    let v: f64 = rng.gen();
    (-2.0 * (1.0 - u).ln()).sqrt() * (std::f64::consts::TAU * v).cos()
}

fn check_unit_rows<T: Scalar>(what: &str, x: &Tensor<T>) -> Result<()> {
    let d = x.dim(1);
    for (i, row) in x.data().chunks(d.max(1)).enumerate() {
        let norm = row.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
            return Err(Error::InvalidArgument(format!(
                "{what}: row {i} has norm {norm}, expected unit norm"
            )));
        }
    }
    Ok(())
}

/// Loss, gradient w.r.t. the queries, and the mean positive similarity.
#[derive(Debug, Clone)]
pub struct NceOutput<T = f32> {
    pub loss: f64,
    pub grad_q: Tensor<T>,
    /// Mean of `q·k₊` over the batch.
    pub positive_similarity: f64,
}

/// Batch-mean InfoNCE of queries against their positives and the live queue
/// rows. Keys and queue are treated as constants.
pub fn info_nce_loss<T: Scalar>(
    q: &Tensor<T>,
    k_pos: &Tensor<T>,
    queue: &MemoryQueue<T>,
    tau: f64,
) -> Result<NceOutput<T>> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::InvalidArgument(format!("temperature {tau} must be positive")));
    }
    if q.rank() != 2 || q.dim(1) != queue.dim() {
        return Err(Error::shape("info_nce queries", q.shape(), &[q.dim(0), queue.dim()]));
    }
    q.ensure_same_shape("info_nce positives", k_pos)?;
    check_unit_rows("info_nce queries", q)?;
    check_unit_rows("info_nce positives", k_pos)?;
    let (b, d) = (q.dim(0), q.dim(1));
    let n = queue.filled();
    if b == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }

    let mut neg_logits = vec![T::zero(); b * n];
    gemm(
        Trans::No,
        Trans::Yes,
        b,
        d,
        n,
        T::one(),
        q.data(),
        queue.negatives(),
        T::zero(),
        &mut neg_logits,
    );

    let inv_tau = 1.0 / tau;
    let scale = 1.0 / (b as f64 * tau);
    let mut loss = 0.0;
    let mut pos_sim = 0.0;
    let mut pos_coef = vec![T::zero(); b];
    // Softmax weights of the negatives, reused as the gemm operand below.
    let mut neg_coef = vec![T::zero(); b * n];
    for i in 0..b {
        let qi = q.outer(i);
        let pos: f64 = qi
            .iter()
            .zip(k_pos.outer(i))
            .map(|(a, c)| a.as_f64() * c.as_f64())
            .sum();
        pos_sim += pos;
        let row = &neg_logits[i * n..(i + 1) * n];
        let max = row.iter().map(|v| v.as_f64()).fold(pos, f64::max) * inv_tau;
        let e_pos = (pos * inv_tau - max).exp();
        let e_neg: Vec<f64> = row.iter().map(|v| (v.as_f64() * inv_tau - max).exp()).collect();
        let z = e_pos + e_neg.iter().sum::<f64>();
        loss += z.ln() + max - pos * inv_tau;
        pos_coef[i] = T::from_f64((e_pos / z - 1.0) * scale);
        for (dst, e) in neg_coef[i * n..(i + 1) * n].iter_mut().zip(e_neg) {
            *dst = T::from_f64(e / z * scale);
        }
    }

    let mut grad = vec![T::zero(); b * d];
    gemm(
        Trans::No,
        Trans::No,
        b,
        n,
        d,
        T::one(),
        &neg_coef,
        queue.negatives(),
        T::zero(),
        &mut grad,
    );
    for i in 0..b {
        for (g, &k) in grad[i * d..(i + 1) * d].iter_mut().zip(k_pos.outer(i)) {
            *g += pos_coef[i] * k;
        }
    }
    Ok(NceOutput {
        loss: loss / b as f64,
        grad_q: Tensor::from_vec(&[b, d], grad)?,
        positive_similarity: pos_sim / b as f64,
    })
}

/// `key ← m·key + (1−m)·query` for every parameter, matched by name.
pub fn momentum_update<T: Scalar, M: Module<T>>(key: &mut M, query: &M, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::InvalidArgument(format!("momentum {m} outside [0, 1]")));
    }
    let q = query.params();
    let k = key.params_mut();
    if q.len() != k.len() {
        return Err(Error::InvalidArgument(format!(
            "key encoder has {} parameters, query encoder {}",
            k.len(),
            q.len()
        )));
    }
    let (mt, one_minus) = (T::from_f64(m), T::from_f64(1.0 - m));
    for ((kn, kp), (qn, qp)) in k.into_iter().zip(q) {
        if kn != qn {
            return Err(Error::InvalidArgument(format!("parameter {kn} paired with {qn}")));
        }
        kp.value.ensure_same_shape("momentum_update", &qp.value)?;
        for (kv, &qv) in kp.value.data_mut().iter_mut().zip(qp.value.data()) {
            *kv = mt * *kv + one_minus * qv;
        }
    }
    Ok(())
}

/// Trainable query encoder and its EMA copy.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderPair<T = f32> {
    pub query: Backbone<T>,
    pub key: Backbone<T>,
    pub momentum: f64,
}

impl<T: Scalar> EncoderPair<T> {
    /// Key encoder starts as an exact copy of the query encoder.
    pub fn new(query: Backbone<T>, momentum: f64) -> Self {
        EncoderPair {
            key: query.clone(),
            query,
            momentum,
        }
    }

    pub fn momentum_update(&mut self) -> Result<()> {
        momentum_update(&mut self.key, &self.query, self.momentum)
    }

    pub fn cast<U: Scalar>(&self) -> EncoderPair<U> {
        EncoderPair {
            query: self.query.cast(),
            key: self.key.cast(),
            momentum: self.momentum,
        }
    }
}

/// RoIAlign geometry for every feature map the backbone exposes.
pub fn level_specs<T: Scalar>(backbone: &Backbone<T>) -> Vec<RoiSpec> {
    backbone
        .config
        .feature_strides()
        .into_iter()
        .map(|s| RoiSpec::new(backbone.config.roi_size, ROI_SAMPLES, s))
        .collect()
}

/// Head outputs (not normalized) for `boxes[i]` in image `i`, one tensor per
/// feature level.
pub fn region_head_outputs<T: Scalar>(
    backbone: &Backbone<T>,
    images: &Tensor<T>,
    boxes: &[BBox],
) -> Result<Vec<Tensor<T>>> {
    let (maps, _) = backbone.features(images)?;
    maps.iter()
        .zip(level_specs(backbone))
        .map(|(map, spec)| {
            let pooled = roi_align_batch(map, boxes, &spec)?;
            Ok(backbone.head.forward(&pooled)?.0)
        })
        .collect()
}

/// Unit-norm region embeddings, one tensor per feature level.
pub fn region_embeddings<T: Scalar>(
    backbone: &Backbone<T>,
    images: &Tensor<T>,
    boxes: &[BBox],
) -> Result<Vec<Tensor<T>>> {
    region_head_outputs(backbone, images, boxes)?
        .iter()
        .map(l2_normalize)
        .collect()
}

/// Query-box augmentation by random high-overlap anchors.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxAugmentation {
    pub enabled: bool,
    /// Clipped anchors of the composite.
    pub anchors: Vec<BBox>,
    pub iou_threshold: f64,
}

impl BoxAugmentation {
    pub fn disabled() -> Self {
        BoxAugmentation {
            enabled: false,
            anchors: Vec::new(),
            iou_threshold: 0.5,
        }
    }

    /// Pooling box for the query branch; `gt` unchanged when disabled.
    pub fn apply<R: Rng>(&self, gt: &BBox, rng: &mut R) -> BBox {
        if self.enabled {
            augment_bbox(gt, &self.anchors, self.iou_threshold, rng)
        } else {
            *gt
        }
    }
}

/// One batch of query/key composites with their ground-truth boxes.
#[derive(Debug, Clone)]
pub struct PairBatch<T = f32> {
    pub query_images: Tensor<T>,
    pub query_boxes: Vec<BBox>,
    pub key_images: Tensor<T>,
    pub key_boxes: Vec<BBox>,
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    /// Mean of the per-level losses.
    pub loss: f64,
    pub level_losses: Vec<f64>,
    /// Mean positive cosine similarity over levels and batch.
    pub positive_similarity: f64,
    /// Boxes the query branch actually pooled.
    pub query_pool_boxes: Vec<BBox>,
    /// Normalized keys per level, already enqueued.
    pub keys: Vec<Tensor<f64>>,
}

/// InfoNCE loss of one batch. Gradients accumulate into the query encoder's
/// parameter buffers. The queues are read but not modified.
pub fn insloc_forward_backward<T: Scalar>(
    query: &mut Backbone<T>,
    key: &Backbone<T>,
    batch: &PairBatch<T>,
    query_pool_boxes: &[BBox],
    queues: &[MemoryQueue<T>],
    tau: f64,
) -> Result<(f64, Vec<f64>, f64, Vec<Tensor<T>>)> {
    if query.config != key.config {
        return Err(Error::InvalidArgument(
            "query and key encoders differ in architecture".into(),
        ));
    }
    let keys = region_embeddings(key, &batch.key_images, &batch.key_boxes)?;
    if queues.len() != keys.len() {
        return Err(Error::InvalidArgument(format!(
            "{} feature levels but {} memory queues",
            keys.len(),
            queues.len()
        )));
    }

    let (maps, trace) = query.features(&batch.query_images)?;
    let specs = level_specs(query);
    let levels = maps.len();
    let weight = T::from_f64(1.0 / levels as f64);
    let mut level_losses = Vec::with_capacity(levels);
    let mut pos_sim = 0.0;
    let mut grad_maps = Vec::with_capacity(levels);
    for (level, (map, spec)) in maps.iter().zip(&specs).enumerate() {
        let pooled = roi_align_batch(map, query_pool_boxes, spec)?;
        let (raw, head_trace) = query.head.forward(&pooled)?;
        let q = l2_normalize(&raw)?;
        let nce = info_nce_loss(&q, &keys[level], &queues[level], tau)?;
        level_losses.push(nce.loss);
        pos_sim += nce.positive_similarity;
        let g_raw = l2_normalize_backward(&nce.grad_q.scale(weight), &raw)?;
        let g_pooled = query.head.backward(&g_raw, &head_trace)?;
        grad_maps.push(roi_align_batch_backward(
            &g_pooled,
            query_pool_boxes,
            spec,
            map.shape(),
        )?);
    }
    query.features_backward(&grad_maps, &trace)?;
    let loss = level_losses.iter().sum::<f64>() / levels as f64;
    Ok((loss, level_losses, pos_sim / levels as f64, keys))
}

/// Full contrastive step: pick the query pooling boxes, compute the loss and
/// query-encoder gradients, then enqueue each level's keys into its own
/// queue.
pub fn insloc_step_loss<T: Scalar, R: Rng>(
    pair: &mut EncoderPair<T>,
    batch: &PairBatch<T>,
    queues: &mut [MemoryQueue<T>],
    tau: f64,
    box_aug: &BoxAugmentation,
    rng: &mut R,
) -> Result<StepOutput> {
    let query_pool_boxes: Vec<BBox> = batch.query_boxes.iter().map(|b| box_aug.apply(b, rng)).collect();
    let (loss, level_losses, positive_similarity, keys) =
        insloc_forward_backward(&mut pair.query, &pair.key, batch, &query_pool_boxes, queues, tau)?;
    for (queue, k) in queues.iter_mut().zip(&keys) {
        queue.enqueue(k)?;
    }
    Ok(StepOutput {
        loss,
        level_losses,
        positive_similarity,
        query_pool_boxes,
        keys: keys.iter().map(Tensor::cast).collect(),
    })
}

/// Named parameter values of a module, for hashing or comparison.
pub fn parameter_snapshot<T: Scalar, M: Module<T>>(module: &M) -> Vec<(String, Tensor<T>)> {
    module
        .params()
        .into_iter()
        .map(|(n, p): (String, &Param<T>)| (n, p.value.clone()))
        .collect()
}
