//! FIFO memory queue of teacher instance embeddings and the temperature
//! softmax similarity distributions computed against it.

use crate::error::{shape_err, Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Embeddings further than this from unit norm are rejected.
pub const UNIT_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryQueue {
    capacity: usize,
    dim: usize,
    /// Ring storage, `capacity x dim`; slot `cursor` is written next.
    slots: Vec<f64>,
    cursor: usize,
    count: usize,
}

impl MemoryQueue {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(Error::InvalidArgument(format!("queue capacity {} and dim {} must be positive", capacity, dim)));
        }
        Ok(Self { capacity, dim, slots: vec![0.0; capacity * dim], cursor: 0, count: 0 })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn is_full(&self) -> bool {
        self.count == self.capacity
    }

    pub fn fill_fraction(&self) -> f64 {
        self.count as f64 / self.capacity as f64
    }

    /// Append in order, evicting the oldest entries once full.
    pub fn enqueue_batch(&mut self, embeddings: &[Vec<f64>]) -> Result<()> {
        for (i, e) in embeddings.iter().enumerate() {
            if e.len() != self.dim {
                return Err(shape_err("enqueue_batch", format!("embedding {} has dim {}, queue dim {}", i, e.len(), self.dim)));
            }
            let norm = e.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !norm.is_finite() || (norm - 1.0).abs() > UNIT_TOLERANCE {
                return Err(Error::InvalidArgument(format!("embedding {} has norm {}, expected unit norm", i, norm)));
            }
        }
        for e in embeddings {
            self.slots[self.cursor * self.dim..(self.cursor + 1) * self.dim].copy_from_slice(e);
            self.cursor = (self.cursor + 1) % self.capacity;
            self.count = (self.count + 1).min(self.capacity);
        }
        Ok(())
    }

    /// Stored entries oldest first, `len x dim`.
    pub fn snapshot(&self) -> Tensor {
        let start = if self.is_full() { self.cursor } else { 0 };
        let mut data = Vec::with_capacity(self.count * self.dim);
        for k in 0..self.count {
            let slot = (start + k) % self.capacity;
            data.extend_from_slice(&self.slots[slot * self.dim..(slot + 1) * self.dim]);
        }
        Tensor::new(&[self.count, self.dim], data).expect("queue dims")
    }

    /// Raw ring state `(slots as capacity x dim, cursor, count)` for
    /// checkpointing.
    pub fn state(&self) -> (Tensor, usize, usize) {
        (Tensor::new(&[self.capacity, self.dim], self.slots.clone()).expect("dims"), self.cursor, self.count)
    }

    pub fn from_state(slots: Tensor, cursor: usize, count: usize) -> Result<Self> {
        slots.expect_rank(2, "queue_state")?;
        let (capacity, dim) = (slots.dim(0), slots.dim(1));
        if capacity == 0 || dim == 0 || cursor >= capacity || count > capacity || (count < capacity && cursor != count) {
            return Err(Error::InvalidArgument(format!(
                "inconsistent queue state: capacity {}, cursor {}, count {}",
                capacity, cursor, count
            )));
        }
        Ok(Self { capacity, dim, slots: slots.into_data(), cursor, count })
    }
}

/// Denominator used for the student distribution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimilarityMode {
    /// Softmax over the student's own logits.
    #[default]
    Consistent,
    /// Student numerators over the teacher's partition function; rows need
    /// not sum to one.
    AsWritten,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityDistribution {
    pub probs: Vec<f64>,
    pub tau: f64,
}

fn check(queue: &Tensor, v: &[f64], tau: f64, op: &'static str) -> Result<()> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("{}: temperature {} must be positive", op, tau)));
    }
    if queue.dim(0) == 0 {
        return Err(Error::InvalidArgument(format!("{}: empty queue", op)));
    }
    if queue.dim(1) != v.len() {
        return Err(shape_err(op, format!("embedding dim {} vs queue dim {}", v.len(), queue.dim(1))));
    }
    Ok(())
}

fn logits(queue: &Tensor, v: &[f64], tau: f64) -> Vec<f64> {
    queue.data().chunks(v.len()).map(|q| q.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() / tau).collect()
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// `softmax_j(t . q_j / tau)` over the queue snapshot (`len x dim`).
pub fn teacher_similarity(t: &[f64], queue: &Tensor, tau: f64) -> Result<SimilarityDistribution> {
    check(queue, t, tau, "teacher_similarity")?;
    let z = logits(queue, t, tau);
    let lse = log_sum_exp(&z);
    Ok(SimilarityDistribution { probs: z.iter().map(|v| (v - lse).exp()).collect(), tau })
}

pub fn student_similarity(s: &[f64], t: &[f64], queue: &Tensor, tau: f64, mode: SimilarityMode) -> Result<SimilarityDistribution> {
    check(queue, s, tau, "student_similarity")?;
    check(queue, t, tau, "student_similarity")?;
    let z = logits(queue, s, tau);
    let lse = match mode {
        SimilarityMode::Consistent => log_sum_exp(&z),
        SimilarityMode::AsWritten => log_sum_exp(&logits(queue, t, tau)),
    };
    Ok(SimilarityDistribution { probs: z.iter().map(|v| (v - lse).exp()).collect(), tau })
}

impl Tape {
    /// Student distributions for a batch of student embeddings `s`
    /// (`N x D`). `teacher` (`N x D`) supplies the denominators in
    /// as-written mode. Returns `N x len`; only `s` receives gradient.
    pub fn student_similarity(&mut self, s: Var, teacher: &Tensor, queue: &Tensor, tau: f64, mode: SimilarityMode) -> Result<Var> {
        let sv = self.value(s).clone();
        sv.expect_rank(2, "student_similarity")?;
        if teacher.shape() != sv.shape() {
            return Err(shape_err("student_similarity", format!("student {:?} vs teacher {:?}", sv.shape(), teacher.shape())));
        }
        let (n, d) = (sv.dim(0), sv.dim(1));
        let k = queue.dim(0);
        let mut out = Vec::with_capacity(n * k);
        for i in 0..n {
            out.extend(student_similarity(sv.row(i), teacher.row(i), queue, tau, mode)?.probs);
        }
        let q = queue.clone();
        self.record(
            "student_similarity",
            &[s],
            Tensor::new(&[n, k], out)?,
            Box::new(move |g, _inputs, p, _needs| {
                let mut ds = vec![0.0; n * d];
                for i in 0..n {
                    let (gi, pi) = (&g.data()[i * k..(i + 1) * k], &p.data()[i * k..(i + 1) * k]);
                    // d p / d z: softmax Jacobian, or diagonal when the
                    // denominator is held fixed
                    let dz: Vec<f64> = match mode {
                        SimilarityMode::Consistent => {
                            let dot: f64 = gi.iter().zip(pi).map(|(a, b)| a * b).sum();
                            gi.iter().zip(pi).map(|(gj, pj)| pj * (gj - dot)).collect()
                        }
                        SimilarityMode::AsWritten => gi.iter().zip(pi).map(|(gj, pj)| gj * pj).collect(),
                    };
                    let row = &mut ds[i * d..(i + 1) * d];
                    for (j, dzj) in dz.iter().enumerate() {
                        for (r, qv) in row.iter_mut().zip(q.row(j)) {
                            *r += dzj * qv / tau;
                        }
                    }
                }
                Ok(vec![Some(Tensor::new(&[n, d], ds)?)])
            }),
        )
    }
}

/// Order of the similarity computations inside one distillation step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum StepPhase {
    Idle,
    TeacherEnqueued,
    TeacherSimilarity,
    StudentSimilarity,
}

/// Enforces enqueue, then teacher similarity, then student similarity.
#[derive(Clone, Debug)]
pub struct PhaseTracker {
    phase: StepPhase,
}

impl Default for PhaseTracker {
    fn default() -> Self {
        Self { phase: StepPhase::Idle }
    }
}

impl PhaseTracker {
    pub fn begin_step(&mut self) {
        self.phase = StepPhase::Idle;
    }

    pub fn phase(&self) -> StepPhase {
        self.phase
    }

    /// Move to `next`, which must directly follow the current phase.
    pub fn advance(&mut self, next: StepPhase) -> Result<()> {
        let expected = match self.phase {
            StepPhase::Idle => StepPhase::TeacherEnqueued,
            StepPhase::TeacherEnqueued => StepPhase::TeacherSimilarity,
            StepPhase::TeacherSimilarity => StepPhase::StudentSimilarity,
            StepPhase::StudentSimilarity => {
                return Err(Error::Protocol(format!("{:?} after the step's student similarity", next)));
            }
        };
        if next != expected {
            return Err(Error::Protocol(format!("{:?} requested while in {:?}; expected {:?}", next, self.phase, expected)));
        }
        self.phase = next;
        Ok(())
    }
}

/// The queue together with the step protocol: teacher embeddings are
/// enqueued first, then teacher distributions are computed, then student
/// distributions. Out-of-order calls fail with [`Error::Protocol`].
#[derive(Clone, Debug)]
pub struct DistillQueue {
    pub queue: MemoryQueue,
    phase: PhaseTracker,
    checks: usize,
}

impl DistillQueue {
    pub fn new(queue: MemoryQueue) -> Self {
        Self { queue, phase: PhaseTracker::default(), checks: 0 }
    }

    /// Number of protocol transitions verified so far.
    pub fn checks(&self) -> usize {
        self.checks
    }

    pub fn phase(&self) -> StepPhase {
        self.phase.phase()
    }

    pub fn begin_step(&mut self) {
        self.phase.begin_step();
    }

    fn advance(&mut self, next: StepPhase) -> Result<()> {
        self.phase.advance(next)?;
        self.checks += 1;
        Ok(())
    }

    pub fn enqueue_teacher(&mut self, embeddings: &[Vec<f64>]) -> Result<()> {
        self.advance(StepPhase::TeacherEnqueued)?;
        self.queue.enqueue_batch(embeddings)
    }

    /// Queue snapshot and `N x K` teacher distributions, or `None` while the
    /// queue is still filling.
    pub fn teacher_distributions(&mut self, embeddings: &[Vec<f64>], tau: f64) -> Result<Option<(Tensor, Tensor)>> {
        self.advance(StepPhase::TeacherSimilarity)?;
        if !self.queue.is_full() {
            return Ok(None);
        }
        let q = self.queue.snapshot();
        let mut rows = Vec::with_capacity(embeddings.len() * q.dim(0));
        for e in embeddings {
            rows.extend(teacher_similarity(e, &q, tau)?.probs);
        }
        let pt = Tensor::new(&[embeddings.len(), q.dim(0)], rows)?;
        Ok(Some((q, pt)))
    }

    /// Student distributions against the snapshot taken for the teacher.
    pub fn student_distributions(
        &mut self,
        tape: &mut Tape,
        s: Var,
        teacher: &Tensor,
        snapshot: &Tensor,
        tau: f64,
        mode: SimilarityMode,
    ) -> Result<Var> {
        self.advance(StepPhase::StudentSimilarity)?;
        tape.student_similarity(s, teacher, snapshot, tau, mode)
    }
}
