//! Reverse-mode automatic differentiation over `ndarray` arrays.
//!
//! Every [`Tensor`] is a node in a dynamically built computation graph.
//! Calling [`Tensor::backward`] on a scalar output walks the graph in
//! reverse topological order and accumulates gradients into every node
//! that was created with `requires_grad`. Gradients of trainable
//! parameters survive until [`Tensor::clear_grad`] is called; all other
//! nodes are rebuilt on each forward pass.

use std::cell::RefCell;
use std::collections::HashSet;
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};

use ndarray::{Array1, Array2, Array3, Array4, ArrayD, Axis, IxDyn, Slice};

/// Dynamic-dimension f64 array, the value type of the graph.
pub type Arr = ArrayD<f64>;

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);

type BackFn = Box<dyn Fn(&Arr, &Arr)>;

struct Node {
    id: usize,
    value: RefCell<Arr>,
    grad: RefCell<Option<Arr>>,
    parents: Vec<Tensor>,
    back: Option<BackFn>,
    requires_grad: bool,
}

/// A shared handle to a graph node. Cloning is cheap (reference count).
#[derive(Clone)]
pub struct Tensor {
    node: Rc<Node>,
}

fn new_id() -> usize {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

impl Tensor {
    fn from_node(value: Arr, parents: Vec<Tensor>, back: Option<BackFn>) -> Tensor {
        let requires_grad = parents.iter().any(|p| p.node.requires_grad);
        Tensor {
            node: Rc::new(Node {
                id: new_id(),
                value: RefCell::new(value),
                grad: RefCell::new(None),
                parents,
                back: if requires_grad { back } else { None },
                requires_grad,
            }),
        }
    }

    /// A trainable leaf: gradients accumulate here.
    pub fn param(value: Arr) -> Tensor {
        Tensor {
            node: Rc::new(Node {
                id: new_id(),
                value: RefCell::new(value),
                grad: RefCell::new(None),
                parents: Vec::new(),
                back: None,
                requires_grad: true,
            }),
        }
    }

    /// A non-trainable leaf.
    pub fn constant(value: Arr) -> Tensor {
        Tensor {
            node: Rc::new(Node {
                id: new_id(),
                value: RefCell::new(value),
                grad: RefCell::new(None),
                parents: Vec::new(),
                back: None,
                requires_grad: false,
            }),
        }
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    pub fn value(&self) -> Arr {
        self.node.value.borrow().clone()
    }

    /// Borrow the value without cloning.
    pub fn with_value<R>(&self, f: impl FnOnce(&Arr) -> R) -> R {
        f(&self.node.value.borrow())
    }

    pub fn shape(&self) -> Vec<usize> {
        self.node.value.borrow().shape().to_vec()
    }

    pub fn scalar_value(&self) -> f64 {
        let v = self.node.value.borrow();
        debug_assert_eq!(v.len(), 1);
        *v.iter().next().expect("scalar tensor")
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn grad(&self) -> Option<Arr> {
        self.node.grad.borrow().clone()
    }

    pub fn clear_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    /// Overwrite the stored value in place (used by optimizers).
    pub fn assign(&self, value: Arr) {
        *self.node.value.borrow_mut() = value;
    }

    /// A constant copy that blocks gradient flow.
    pub fn detach(&self) -> Tensor {
        Tensor::constant(self.value())
    }

    fn accumulate(&self, g: &Arr) {
        if !self.node.requires_grad {
            return;
        }
        let mut slot = self.node.grad.borrow_mut();
        match slot.as_mut() {
            Some(existing) => *existing += g,
            None => *slot = Some(g.clone()),
        }
    }

    /// Backpropagate from this scalar node.
    pub fn backward(&self) {
        assert_eq!(
            self.node.value.borrow().len(),
            1,
            "backward() requires a scalar output"
        );
        let order = self.topo_order();
        self.accumulate(&ArrayD::from_elem(self.node.value.borrow().raw_dim(), 1.0));
        for t in order.iter().rev() {
            let grad = t.node.grad.borrow().clone();
            if let (Some(g), Some(back)) = (grad, t.node.back.as_ref()) {
                back(&g, &t.node.value.borrow());
            }
        }
    }

    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut seen = HashSet::new();
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        seen.insert(self.node.id);
        while let Some((t, child)) = stack.pop() {
            if child < t.node.parents.len() {
                let parent = t.node.parents[child].clone();
                stack.push((t, child + 1));
                if parent.node.requires_grad && seen.insert(parent.node.id) {
                    stack.push((parent, 0));
                }
            } else {
                order.push(t);
            }
        }
        order
    }
}

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

impl Tensor {
    pub fn add(&self, rhs: &Tensor) -> Tensor {
        assert_eq!(self.shape(), rhs.shape(), "add: shape mismatch");
        let v = &*self.node.value.borrow() + &*rhs.node.value.borrow();
        let (a, b) = (self.clone(), rhs.clone());
        Tensor::from_node(
            v,
            vec![self.clone(), rhs.clone()],
            Some(Box::new(move |g, _| {
                a.accumulate(g);
                b.accumulate(g);
            })),
        )
    }

    pub fn sub(&self, rhs: &Tensor) -> Tensor {
        self.add(&rhs.neg())
    }

    pub fn mul(&self, rhs: &Tensor) -> Tensor {
        assert_eq!(self.shape(), rhs.shape(), "mul: shape mismatch");
        let v = &*self.node.value.borrow() * &*rhs.node.value.borrow();
        let (a, b) = (self.clone(), rhs.clone());
        Tensor::from_node(
            v,
            vec![self.clone(), rhs.clone()],
            Some(Box::new(move |g, _| {
                a.accumulate(&(g * &*b.node.value.borrow()));
                b.accumulate(&(g * &*a.node.value.borrow()));
            })),
        )
    }

    /// Multiply by a single-element tensor, broadcasting it over `self`.
    pub fn scale(&self, s: &Tensor) -> Tensor {
        assert_eq!(s.node.value.borrow().len(), 1, "scale: scalar expected");
        let sv = s.scalar_value();
        let v = self.node.value.borrow().mapv(|x| x * sv);
        let (a, b) = (self.clone(), s.clone());
        Tensor::from_node(
            v,
            vec![self.clone(), s.clone()],
            Some(Box::new(move |g, _| {
                let sv = b.scalar_value();
                a.accumulate(&g.mapv(|x| x * sv));
                let dot: f64 = g
                    .iter()
                    .zip(a.node.value.borrow().iter())
                    .map(|(x, y)| x * y)
                    .sum();
                let shape = b.node.value.borrow().shape().to_vec();
                b.accumulate(&ArrayD::from_elem(IxDyn(&shape), dot));
            })),
        )
    }

    pub fn neg(&self) -> Tensor {
        let v = self.node.value.borrow().mapv(|x| -x);
        let a = self.clone();
        Tensor::from_node(
            v,
            vec![self.clone()],
            Some(Box::new(move |g, _| a.accumulate(&g.mapv(|x| -x)))),
        )
    }

    pub fn add_s(&self, c: f64) -> Tensor {
        let v = self.node.value.borrow().mapv(|x| x + c);
        let a = self.clone();
        Tensor::from_node(
            v,
            vec![self.clone()],
            Some(Box::new(move |g, _| a.accumulate(g))),
        )
    }

    pub fn mul_s(&self, c: f64) -> Tensor {
        let v = self.node.value.borrow().mapv(|x| x * c);
        let a = self.clone();
        Tensor::from_node(
            v,
            vec![self.clone()],
            Some(Box::new(move |g, _| a.accumulate(&g.mapv(|x| x * c)))),
        )
    }

    pub fn exp(&self) -> Tensor {
        let v = self.node.value.borrow().mapv(f64::exp);
        let a = self.clone();
        Tensor::from_node(
            v,
            vec![self.clone()],
            Some(Box::new(move |g, out| a.accumulate(&(g * out)))),
        )
    }

    pub fn ln(&self) -> Tensor {
        let v = self.node.value.borrow().mapv(f64::ln);
        let a = self.clone();
        Tensor::from_node(
            v,
            vec![self.clone()],
            Some(Box::new(move |g, _| {
                a.accumulate(&(g / &*a.node.value.borrow()));
            })),
        )
    }

    pub fn sqrt(&self) -> Tensor {
        let v = self.node.value.borrow().mapv(f64::sqrt);
        let a = self.clone();
        Tensor::from_node(
            v,
            vec![self.clone()],
            Some(Box::new(move |g, out| {
                a.accumulate(&(g * &out.mapv(|y| 0.5 / y)));
            })),
        )
    }

    pub fn recip(&self) -> Tensor {
        let v = self.node.value.borrow().mapv(|x| 1.0 / x);
        let a = self.clone();
        Tensor::from_node(
            v,
            vec![self.clone()],
            Some(Box::new(move |g, out| {
                a.accumulate(&(g * &out.mapv(|y| -y * y)));
            })),
        )
    }

    pub fn abs(&self) -> Tensor {
        let v = self.node.value.borrow().mapv(f64::abs);
        let a = self.clone();
        Tensor::from_node(
            v,
            vec![self.clone()],
            Some(Box::new(move |g, _| {
                let sign = a.node.value.borrow().mapv(|x| {
                    if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                a.accumulate(&(g * &sign));
            })),
        )
    }

    pub fn relu(&self) -> Tensor {
        let v = self.node.value.borrow().mapv(|x| x.max(0.0));
        let a = self.clone();
        Tensor::from_node(
            v,
            vec![self.clone()],
            Some(Box::new(move |g, _| {
                let mask = a.node.value.borrow().mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                a.accumulate(&(g * &mask));
            })),
        )
    }

    pub fn sigmoid(&self) -> Tensor {
        let v = self.node.value.borrow().mapv(|x| 1.0 / (1.0 + (-x).exp()));
        let a = self.clone();
        Tensor::from_node(
            v,
            vec![self.clone()],
            Some(Box::new(move |g, out| {
                a.accumulate(&(g * &out.mapv(|y| y * (1.0 - y))));
            })),
        )
    }

    pub fn tanh(&self) -> Tensor {
        let v = self.node.value.borrow().mapv(f64::tanh);
        let a = self.clone();
        Tensor::from_node(
            v,
            vec![self.clone()],
            Some(Box::new(move |g, out| {
                a.accumulate(&(g * &out.mapv(|y| 1.0 - y * y)));
            })),
        )
    }

    /// x * sigmoid(x), the activation used throughout the codec and generator.
    pub fn silu(&self) -> Tensor {
        self.mul(&self.sigmoid())
    }

    pub fn square(&self) -> Tensor {
        self.mul(self)
    }
}

// ---------------------------------------------------------------------------
// Reductions and shape ops
// ---------------------------------------------------------------------------

impl Tensor {
    pub fn sum(&self) -> Tensor {
        let v = ArrayD::from_elem(IxDyn(&[]), self.node.value.borrow().sum());
        let a = self.clone();
        let shape = self.shape();
        Tensor::from_node(
            v,
            vec![self.clone()],
            Some(Box::new(move |g, _| {
                let gv = *g.iter().next().unwrap();
                a.accumulate(&ArrayD::from_elem(IxDyn(&shape), gv));
            })),
        )
    }

    pub fn mean(&self) -> Tensor {
        let n = self.node.value.borrow().len() as f64;
        self.sum().mul_s(1.0 / n)
    }

    /// Sum over one axis (axis removed from the output shape).
    pub fn sum_axis(&self, axis: usize) -> Tensor {
        let v = self.node.value.borrow().sum_axis(Axis(axis));
        let a = self.clone();
        let shape = self.shape();
        Tensor::from_node(
            v,
            vec![self.clone()],
            Some(Box::new(move |g, _| {
                let expanded = g.clone().insert_axis(Axis(axis));
                let grown = expanded
                    .broadcast(IxDyn(&shape))
                    .expect("sum_axis grad broadcast")
                    .to_owned();
                a.accumulate(&grown);
            })),
        )
    }

    pub fn mean_axis(&self, axis: usize) -> Tensor {
        let n = self.shape()[axis] as f64;
        self.sum_axis(axis).mul_s(1.0 / n)
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        let orig = self.shape();
        let v = self
            .node
            .value
            .borrow()
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: element count mismatch");
        let a = self.clone();
        Tensor::from_node(
            v,
            vec![self.clone()],
            Some(Box::new(move |g, _| {
                let back = g
                    .as_standard_layout()
                    .to_owned()
                    .into_shape_with_order(IxDyn(&orig))
                    .expect("reshape grad");
                a.accumulate(&back);
            })),
        )
    }

    /// Transpose a 2-D tensor.
    pub fn t2(&self) -> Tensor {
        let v = self.node.value.borrow().t().to_owned();
        let a = self.clone();
        Tensor::from_node(
            v,
            vec![self.clone()],
            Some(Box::new(move |g, _| {
                a.accumulate(&g.t().to_owned());
            })),
        )
    }

    /// 2-D matrix product.
    pub fn matmul(&self, rhs: &Tensor) -> Tensor {
        let av = as2(&self.node.value.borrow());
        let bv = as2(&rhs.node.value.borrow());
        let v = av.dot(&bv).into_dyn();
        let (a, b) = (self.clone(), rhs.clone());
        Tensor::from_node(
            v,
            vec![self.clone(), rhs.clone()],
            Some(Box::new(move |g, _| {
                let g2 = as2(g);
                let av = as2(&a.node.value.borrow());
                let bv = as2(&b.node.value.borrow());
                a.accumulate(&g2.dot(&bv.t()).into_dyn());
                b.accumulate(&av.t().dot(&g2).into_dyn());
            })),
        )
    }

    /// Concatenate along an axis.
    pub fn concat(parts: &[Tensor], axis: usize) -> Tensor {
        assert!(!parts.is_empty());
        let values: Vec<Arr> = parts.iter().map(|p| p.value()).collect();
        let views: Vec<_> = values.iter().map(|v| v.view()).collect();
        let v = ndarray::concatenate(Axis(axis), &views).expect("concat shapes");
        let owned: Vec<Tensor> = parts.to_vec();
        let lens: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        Tensor::from_node(
            v,
            parts.to_vec(),
            Some(Box::new(move |g, _| {
                let mut start = 0isize;
                for (p, len) in owned.iter().zip(&lens) {
                    let part = g
                        .slice_axis(Axis(axis), Slice::from(start..start + *len as isize))
                        .to_owned();
                    p.accumulate(&part);
                    start += *len as isize;
                }
            })),
        )
    }

    /// Contiguous slice along an axis.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Tensor {
        let v = self
            .node
            .value
            .borrow()
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .to_owned();
        let a = self.clone();
        let shape = self.shape();
        Tensor::from_node(
            v,
            vec![self.clone()],
            Some(Box::new(move |g, _| {
                let mut full = ArrayD::zeros(IxDyn(&shape));
                full.slice_axis_mut(Axis(axis), Slice::from(start..start + len))
                    .assign(g);
                a.accumulate(&full);
            })),
        )
    }

    /// Reorder the rows of a 2-D tensor by an index list (gather).
    pub fn gather_rows(&self, idx: &[usize]) -> Tensor {
        let a2 = as2(&self.node.value.borrow());
        let (n, d) = a2.dim();
        let mut out = Array2::zeros((idx.len(), d));
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).assign(&a2.row(i));
        }
        let a = self.clone();
        let idx = idx.to_vec();
        Tensor::from_node(
            out.into_dyn(),
            vec![self.clone()],
            Some(Box::new(move |g, _| {
                let g2 = as2(g);
                let mut gx = Array2::zeros((n, d));
                for (r, &i) in idx.iter().enumerate() {
                    let mut target = gx.row_mut(i);
                    target += &g2.row(r);
                }
                a.accumulate(&gx.into_dyn());
            })),
        )
    }

    /// Extract one element (by flattened index) as a scalar tensor.
    pub fn pick(&self, flat_idx: usize) -> Tensor {
        let value = *self
            .node
            .value
            .borrow()
            .iter()
            .nth(flat_idx)
            .expect("pick: index in range");
        let v = ArrayD::from_elem(IxDyn(&[]), value);
        let a = self.clone();
        let shape = self.shape();
        Tensor::from_node(
            v,
            vec![self.clone()],
            Some(Box::new(move |g, _| {
                let gv = *g.iter().next().unwrap();
                let mut full = Array1::zeros(shape.iter().product::<usize>());
                full[flat_idx] = gv;
                a.accumulate(
                    &full
                        .into_dyn()
                        .into_shape_with_order(IxDyn(&shape))
                        .unwrap(),
                );
            })),
        )
    }
}

// ---------------------------------------------------------------------------
// Broadcast ops
// ---------------------------------------------------------------------------

impl Tensor {
    /// (n, d) + column vector (n,), broadcast over columns.
    pub fn add_col(&self, v: &Tensor) -> Tensor {
        let a2 = as2(&self.node.value.borrow());
        let v1 = as1(&v.node.value.borrow());
        let out = (&a2 + &v1.clone().insert_axis(Axis(1))).into_dyn();
        let (a, b) = (self.clone(), v.clone());
        Tensor::from_node(
            out,
            vec![self.clone(), v.clone()],
            Some(Box::new(move |g, _| {
                a.accumulate(g);
                b.accumulate(&as2(g).sum_axis(Axis(1)).into_dyn());
            })),
        )
    }

    /// (n, d) * column vector (n,).
    pub fn mul_col(&self, v: &Tensor) -> Tensor {
        let a2 = as2(&self.node.value.borrow());
        let v1 = as1(&v.node.value.borrow());
        let out = (&a2 * &v1.clone().insert_axis(Axis(1))).into_dyn();
        let (a, b) = (self.clone(), v.clone());
        Tensor::from_node(
            out,
            vec![self.clone(), v.clone()],
            Some(Box::new(move |g, _| {
                let g2 = as2(g);
                let v1 = as1(&b.node.value.borrow());
                a.accumulate(&(&g2 * &v1.insert_axis(Axis(1))).into_dyn());
                let a2 = as2(&a.node.value.borrow());
                b.accumulate(&(&g2 * &a2).sum_axis(Axis(1)).into_dyn());
            })),
        )
    }

    /// (n, d) + row vector (d,), broadcast over rows.
    pub fn add_row(&self, v: &Tensor) -> Tensor {
        let a2 = as2(&self.node.value.borrow());
        let v1 = as1(&v.node.value.borrow());
        let out = (&a2 + &v1).into_dyn();
        let (a, b) = (self.clone(), v.clone());
        Tensor::from_node(
            out,
            vec![self.clone(), v.clone()],
            Some(Box::new(move |g, _| {
                a.accumulate(g);
                b.accumulate(&as2(g).sum_axis(Axis(0)).into_dyn());
            })),
        )
    }

    /// (n, d) * row vector (d,).
    pub fn mul_row(&self, v: &Tensor) -> Tensor {
        let a2 = as2(&self.node.value.borrow());
        let v1 = as1(&v.node.value.borrow());
        let out = (&a2 * &v1).into_dyn();
        let (a, b) = (self.clone(), v.clone());
        Tensor::from_node(
            out,
            vec![self.clone(), v.clone()],
            Some(Box::new(move |g, _| {
                let g2 = as2(g);
                let v1 = as1(&b.node.value.borrow());
                a.accumulate(&(&g2 * &v1).into_dyn());
                let a2 = as2(&a.node.value.borrow());
                b.accumulate(&(&g2 * &a2).sum_axis(Axis(0)).into_dyn());
            })),
        )
    }

    /// (c, h, w) + channel vector (c,).
    pub fn add_chan(&self, v: &Tensor) -> Tensor {
        let a3 = as3(&self.node.value.borrow());
        let v1 = as1(&v.node.value.borrow());
        let mut out = a3.clone();
        for (mut plane, &b) in out.outer_iter_mut().zip(v1.iter()) {
            plane += b;
        }
        let (a, b) = (self.clone(), v.clone());
        Tensor::from_node(
            out.into_dyn(),
            vec![self.clone(), v.clone()],
            Some(Box::new(move |g, _| {
                a.accumulate(g);
                let g3 = as3(g);
                let sums: Vec<f64> = g3.outer_iter().map(|p| p.sum()).collect();
                b.accumulate(&Array1::from_vec(sums).into_dyn());
            })),
        )
    }

    /// (c, h, w) * channel vector (c,).
    pub fn mul_chan(&self, v: &Tensor) -> Tensor {
        let a3 = as3(&self.node.value.borrow());
        let v1 = as1(&v.node.value.borrow());
        let mut out = a3.clone();
        for (mut plane, &b) in out.outer_iter_mut().zip(v1.iter()) {
            plane *= b;
        }
        let (a, b) = (self.clone(), v.clone());
        Tensor::from_node(
            out.into_dyn(),
            vec![self.clone(), v.clone()],
            Some(Box::new(move |g, _| {
                let g3 = as3(g);
                let v1 = as1(&b.node.value.borrow());
                let mut ga = g3.clone();
                for (mut plane, &s) in ga.outer_iter_mut().zip(v1.iter()) {
                    plane *= s;
                }
                a.accumulate(&ga.into_dyn());
                let a3 = as3(&a.node.value.borrow());
                let sums: Vec<f64> = g3
                    .outer_iter()
                    .zip(a3.outer_iter())
                    .map(|(gp, ap)| (&gp * &ap).sum())
                    .collect();
                b.accumulate(&Array1::from_vec(sums).into_dyn());
            })),
        )
    }
}

// ---------------------------------------------------------------------------
// Softmax family
// ---------------------------------------------------------------------------

impl Tensor {
    /// Row-wise softmax of a 2-D tensor.
    pub fn softmax_rows(&self) -> Tensor {
        let a2 = as2(&self.node.value.borrow());
        let mut out = a2.clone();
        for mut row in out.outer_iter_mut() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|x| (x - m).exp());
            let s = row.sum();
            row.mapv_inplace(|x| x / s);
        }
        let a = self.clone();
        Tensor::from_node(
            out.into_dyn(),
            vec![self.clone()],
            Some(Box::new(move |g, out| {
                let g2 = as2(g);
                let y = as2(out);
                let mut ga = Array2::zeros(y.raw_dim());
                for ((grow, yrow), mut garow) in g2
                    .outer_iter()
                    .zip(y.outer_iter())
                    .zip(ga.outer_iter_mut())
                {
                    let dot: f64 = grow.iter().zip(yrow.iter()).map(|(a, b)| a * b).sum();
                    for ((ga_i, &g_i), &y_i) in
                        garow.iter_mut().zip(grow.iter()).zip(yrow.iter())
                    {
                        *ga_i = y_i * (g_i - dot);
                    }
                }
                a.accumulate(&ga.into_dyn());
            })),
        )
    }

    /// Log-softmax of a 1-D tensor.
    pub fn log_softmax(&self) -> Tensor {
        let v1 = as1(&self.node.value.borrow());
        let m = v1.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + v1.mapv(|x| (x - m).exp()).sum().ln();
        let out = v1.mapv(|x| x - lse);
        let a = self.clone();
        Tensor::from_node(
            out.into_dyn(),
            vec![self.clone()],
            Some(Box::new(move |g, out| {
                let g1 = as1(g);
                let soft = as1(out).mapv(f64::exp);
                let gsum = g1.sum();
                let ga = &g1 - &soft.mapv(|p| p * gsum);
                a.accumulate(&ga.into_dyn());
            })),
        )
    }
}

// ---------------------------------------------------------------------------
// Convolution and pooling (single sample, CHW layout)
// ---------------------------------------------------------------------------

fn im2col(
    x: &Array3<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> (Array2<f64>, usize, usize) {
    let (c, h, w) = x.dim();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut cols = Array2::zeros((c * kh * kw, oh * ow));
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ci * kh * kw + ki * kw + kj;
                for oi in 0..oh {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for oj in 0..ow {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        cols[[row, oi * ow + oj]] = x[[ci, ii as usize, jj as usize]];
                    }
                }
            }
        }
    }
    (cols, oh, ow)
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &Array2<f64>,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array3<f64> {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut x = Array3::zeros((c, h, w));
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ci * kh * kw + ki * kw + kj;
                for oi in 0..oh {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for oj in 0..ow {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        x[[ci, ii as usize, jj as usize]] += cols[[row, oi * ow + oj]];
                    }
                }
            }
        }
    }
    x
}

impl Tensor {
    /// 2-D convolution of a (C, H, W) input with an (O, C, kh, kw) kernel.
    pub fn conv2d(&self, weight: &Tensor, stride: usize, pad: usize) -> Tensor {
        let x3 = as3(&self.node.value.borrow());
        let w4 = as4(&weight.node.value.borrow());
        let (o, c, kh, kw) = w4.dim();
        let (cx, h, w) = x3.dim();
        assert_eq!(c, cx, "conv2d: channel mismatch");
        let (cols, oh, ow) = im2col(&x3, kh, kw, stride, pad);
        let wmat = w4
            .to_shape((o, c * kh * kw))
            .expect("conv2d weight reshape")
            .to_owned();
        let out = wmat
            .dot(&cols)
            .into_shape_with_order((o, oh, ow))
            .unwrap()
            .into_dyn();
        let (xt, wt) = (self.clone(), weight.clone());
        Tensor::from_node(
            out,
            vec![self.clone(), weight.clone()],
            Some(Box::new(move |g, _| {
                let g2 = as3(g)
                    .as_standard_layout()
                    .to_shape((o, oh * ow))
                    .expect("conv grad reshape")
                    .to_owned();
                let w4 = as4(&wt.node.value.borrow());
                let wmat = w4.to_shape((o, c * kh * kw)).unwrap().to_owned();
                // dW = g . cols^T
                let gw = g2
                    .dot(&cols.t())
                    .as_standard_layout()
                    .to_owned()
                    .into_shape_with_order((o, c, kh, kw))
                    .unwrap();
                wt.accumulate(&gw.into_dyn());
                // dX = col2im(W^T . g)
                let gcols = wmat.t().dot(&g2);
                let gx = col2im(&gcols, c, h, w, kh, kw, stride, pad);
                xt.accumulate(&gx.into_dyn());
            })),
        )
    }

    /// 2x2 max pooling with stride 2 on a (C, H, W) input.
    pub fn maxpool2(&self) -> Tensor {
        let x3 = as3(&self.node.value.borrow());
        let (c, h, w) = x3.dim();
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Array3::zeros((c, oh, ow));
        let mut arg = vec![0usize; c * oh * ow];
        for ci in 0..c {
            for oi in 0..oh {
                for oj in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0;
                    for di in 0..2 {
                        for dj in 0..2 {
                            let (ii, jj) = (oi * 2 + di, oj * 2 + dj);
                            let v = x3[[ci, ii, jj]];
                            if v > best {
                                best = v;
                                best_idx = ii * w + jj;
                            }
                        }
                    }
                    out[[ci, oi, oj]] = best;
                    arg[ci * oh * ow + oi * ow + oj] = best_idx;
                }
            }
        }
        let a = self.clone();
        Tensor::from_node(
            out.into_dyn(),
            vec![self.clone()],
            Some(Box::new(move |g, _| {
                let g3 = as3(g);
                let mut gx = Array3::zeros((c, h, w));
                for ci in 0..c {
                    for oi in 0..oh {
                        for oj in 0..ow {
                            let idx = arg[ci * oh * ow + oi * ow + oj];
                            gx[[ci, idx / w, idx % w]] += g3[[ci, oi, oj]];
                        }
                    }
                }
                a.accumulate(&gx.into_dyn());
            })),
        )
    }

    /// 2x2 average pooling with stride 2.
    pub fn avgpool2(&self) -> Tensor {
        let x3 = as3(&self.node.value.borrow());
        let (c, h, w) = x3.dim();
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Array3::zeros((c, oh, ow));
        for ci in 0..c {
            for oi in 0..oh {
                for oj in 0..ow {
                    let mut s = 0.0;
                    for di in 0..2 {
                        for dj in 0..2 {
                            s += x3[[ci, oi * 2 + di, oj * 2 + dj]];
                        }
                    }
                    out[[ci, oi, oj]] = s / 4.0;
                }
            }
        }
        let a = self.clone();
        Tensor::from_node(
            out.into_dyn(),
            vec![self.clone()],
            Some(Box::new(move |g, _| {
                let g3 = as3(g);
                let mut gx = Array3::zeros((c, h, w));
                for ci in 0..c {
                    for oi in 0..oh {
                        for oj in 0..ow {
                            let gv = g3[[ci, oi, oj]] / 4.0;
                            for di in 0..2 {
                                for dj in 0..2 {
                                    gx[[ci, oi * 2 + di, oj * 2 + dj]] = gv;
                                }
                            }
                        }
                    }
                }
                a.accumulate(&gx.into_dyn());
            })),
        )
    }

    /// Nearest-neighbour 2x upsampling of a (C, H, W) input.
    pub fn upsample2(&self) -> Tensor {
        let x3 = as3(&self.node.value.borrow());
        let (c, h, w) = x3.dim();
        let mut out = Array3::zeros((c, h * 2, w * 2));
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let v = x3[[ci, i, j]];
                    for di in 0..2 {
                        for dj in 0..2 {
                            out[[ci, i * 2 + di, j * 2 + dj]] = v;
                        }
                    }
                }
            }
        }
        let a = self.clone();
        Tensor::from_node(
            out.into_dyn(),
            vec![self.clone()],
            Some(Box::new(move |g, _| {
                let g3 = as3(g);
                let mut gx = Array3::zeros((c, h, w));
                for ci in 0..c {
                    for i in 0..h {
                        for j in 0..w {
                            let mut s = 0.0;
                            for di in 0..2 {
                                for dj in 0..2 {
                                    s += g3[[ci, i * 2 + di, j * 2 + dj]];
                                }
                            }
                            gx[[ci, i, j]] = s;
                        }
                    }
                }
                a.accumulate(&gx.into_dyn());
            })),
        )
    }
}

// ---------------------------------------------------------------------------
// View helpers
// ---------------------------------------------------------------------------

fn as1(a: &Arr) -> Array1<f64> {
    a.view()
        .into_dimensionality::<ndarray::Ix1>()
        .expect("expected 1-D tensor")
        .to_owned()
}

fn as2(a: &Arr) -> Array2<f64> {
    a.view()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("expected 2-D tensor")
        .to_owned()
}

fn as3(a: &Arr) -> Array3<f64> {
    a.view()
        .into_dimensionality::<ndarray::Ix3>()
        .expect("expected 3-D tensor")
        .to_owned()
}

fn as4(a: &Arr) -> Array4<f64> {
    a.view()
        .into_dimensionality::<ndarray::Ix4>()
        .expect("expected 4-D tensor")
        .to_owned()
}
