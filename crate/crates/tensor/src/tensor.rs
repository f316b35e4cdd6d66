use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock, RwLockReadGuard, RwLockWriteGuard};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::error::{invalid, shape_err, Result, TensorError};
use crate::Scalar;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static NO_GRAD_DEPTH: Cell<usize> = const { Cell::new(0) };
}

/// Runs `f` without recording any operation on the tape.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let _guard = NoGradGuard::new();
    f()
}

/// While alive, ops on this thread build untracked tensors.
pub struct NoGradGuard(());

impl NoGradGuard {
    pub fn new() -> Self {
        NO_GRAD_DEPTH.with(|d| d.set(d.get() + 1));
        NoGradGuard(())
    }
}

impl Default for NoGradGuard {
    fn default() -> Self {
        Self::new()
    }
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        NO_GRAD_DEPTH.with(|d| d.set(d.get() - 1));
    }
}

pub fn grad_enabled() -> bool {
    NO_GRAD_DEPTH.with(|d| d.get() == 0)
}

/// Backward closure: receives the output gradient and a per-parent "needs grad"
/// mask, returns one optional gradient per parent.
pub(crate) type BackwardFn<T> = dyn Fn(&[T], &[bool]) -> Vec<Option<Vec<T>>> + Send + Sync;

struct GradFn<T: Scalar> {
    parents: Vec<Tensor<T>>,
    backward: Box<BackwardFn<T>>,
}

struct Node<T: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: RwLock<Vec<T>>,
    grad: Mutex<Option<Vec<T>>>,
    requires_grad: AtomicBool,
    grad_fn: Option<GradFn<T>>,
}

/// Dense row-major tensor. Cloning is cheap and shares storage.
pub struct Tensor<T: Scalar = f32>(Arc<Node<T>>);

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor(Arc::clone(&self.0))
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let data = self.data();
        let head: Vec<_> = data.iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("dtype", &T::NAME)
            .field("requires_grad", &self.requires_grad())
            .field("head", &head)
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    fn build(data: Vec<T>, shape: Vec<usize>, grad_fn: Option<GradFn<T>>) -> Self {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        Tensor(Arc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data: RwLock::new(data),
            grad: Mutex::new(None),
            requires_grad: AtomicBool::new(false),
            grad_fn,
        }))
    }

    pub fn from_vec(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return shape_err("from_vec", format!("{} values for shape {:?}", data.len(), shape));
        }
        Ok(Self::build(data, shape.to_vec(), None))
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self::build(vec![value; n], shape.to_vec(), None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self::build(vec![value], vec![1], None)
    }

    pub fn randn<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let v: f64 = StandardNormal.sample(rng);
                T::from_f64_lossy(v)
            })
            .collect();
        Self::build(data, shape.to_vec(), None)
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], low: f64, high: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let dist = Uniform::new(low, high).expect("low < high");
        let data = (0..n).map(|_| T::from_f64_lossy(dist.sample(rng))).collect();
        Self::build(data, shape.to_vec(), None)
    }

    /// Creates the output of a differentiable op. The backward closure is only
    /// retained when gradients are enabled and some parent is tracked.
    pub(crate) fn from_op<F>(data: Vec<T>, shape: Vec<usize>, parents: &[&Tensor<T>], backward: F) -> Self
    where
        F: Fn(&[T], &[bool]) -> Vec<Option<Vec<T>>> + Send + Sync + 'static,
    {
        let tracked = grad_enabled() && parents.iter().any(|p| p.is_tracked());
        let grad_fn = tracked.then(|| GradFn {
            parents: parents.iter().map(|p| (*p).clone()).collect(),
            backward: Box::new(backward),
        });
        Self::build(data, shape, grad_fn)
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn ndim(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.shape.iter().product()
    }

    pub fn data(&self) -> RwLockReadGuard<'_, Vec<T>> {
        self.0.data.read().expect("tensor data lock poisoned")
    }

    /// Mutable access to the storage. Intended for leaf tensors (parameters,
    /// gradient-check perturbations); mutating an interior node invalidates
    /// any graph built on it.
    pub fn data_mut(&self) -> RwLockWriteGuard<'_, Vec<T>> {
        self.0.data.write().expect("tensor data lock poisoned")
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.data().clone()
    }

    pub fn item(&self) -> T {
        self.data()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad.load(Ordering::Relaxed)
    }

    pub fn set_requires_grad(&self, on: bool) {
        self.0.requires_grad.store(on, Ordering::Relaxed);
    }

    /// Marks this tensor as a trainable leaf and returns it.
    pub fn into_param(self) -> Self {
        self.set_requires_grad(true);
        self
    }

    fn is_tracked(&self) -> bool {
        self.requires_grad() || self.0.grad_fn.is_some()
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.0.grad.lock().expect("grad lock poisoned").clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().expect("grad lock poisoned") = None;
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Self {
        Self::build(self.to_vec(), self.0.shape.clone(), None)
    }

    /// Converts element type; the result is a fresh untracked leaf.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        let data = self.data().iter().map(|v| U::from_f64_lossy(v.as_f64())).collect();
        Tensor::build(data, self.0.shape.clone(), None)
    }

    fn accumulate_grad(&self, g: &[T]) {
        let mut slot = self.0.grad.lock().expect("grad lock poisoned");
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += *b),
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Reverse-mode sweep from a single-element tensor. Gradients accumulate
    /// into every reachable leaf with `requires_grad`.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarBackward(self.0.shape.clone()));
        }
        if !self.is_tracked() {
            return invalid("backward", "tensor is not part of a tracked graph");
        }
        let order = self.topo_order();
        let mut pending: HashMap<u64, Vec<T>> = HashMap::new();
        pending.insert(self.id(), vec![T::one()]);
        for node in order.iter().rev() {
            let Some(g) = pending.remove(&node.id()) else {
                continue;
            };
            match &node.0.grad_fn {
                Some(gf) => {
                    let needs: Vec<bool> = gf.parents.iter().map(|p| p.is_tracked()).collect();
                    let grads = (gf.backward)(&g, &needs);
                    for ((parent, pg), need) in gf.parents.iter().zip(grads).zip(&needs) {
                        let (Some(pg), true) = (pg, *need) else {
                            continue;
                        };
                        debug_assert_eq!(pg.len(), parent.numel());
                        match pending.get_mut(&parent.id()) {
                            Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += *b),
                            None => {
                                pending.insert(parent.id(), pg);
                            }
                        }
                    }
                }
                None => {
                    if node.requires_grad() {
                        node.accumulate_grad(&g);
                    }
                }
            }
        }
        Ok(())
    }

    fn topo_order(&self) -> Vec<Tensor<T>> {
        let mut order = Vec::new();
        let mut visited = HashSet::new();
        let mut stack: Vec<(Tensor<T>, bool)> = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !visited.insert(node.id()) {
                continue;
            }
            stack.push((node.clone(), true));
            if let Some(gf) = &node.0.grad_fn {
                for p in &gf.parents {
                    if p.is_tracked() && !visited.contains(&p.id()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order
    }
}
