//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] records every primitive applied during a forward pass. Calling
//! [`Graph::backward`] walks the record in reverse and accumulates adjoints.
//! The primitive set is deliberately small: matrix multiply, elementwise add,
//! row-broadcast add, `tanh`, SiLU, mean, elementwise squared error and
//! column concatenation. Each has a matching adjoint below and a
//! finite-difference test in this module.
//!
//! Scalars are `1 x 1` matrices, so a scalar can be scaled by multiplying
//! with a constant `1 x 1` matrix.

use std::borrow::Cow;

use crate::error::{invalid, Error, Result};
use crate::tensor::{ParamSet, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Tanh(usize),
    Silu(usize),
    Mean(usize),
    SqErr(usize, usize),
    Concat(Vec<usize>),
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    tracked: bool,
}

/// A private evaluation context. Build one per forward/backward pass.
#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

/// `C = beta * C + op(A) * op(B)` where `op` optionally transposes. `a` is
/// stored row-major as `m x k` (or `k x m` when `ta`), `b` as `k x n`
/// (or `n x k` when `tb`).
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    beta: f64,
    c: &mut [f64],
) {
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the slices are at least as long as the strided views require,
    // checked by the assertion above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn finite_or(primitive: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NumericalInstability { primitive })
    }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].tracked)
    }

    /// A differentiable leaf borrowed from a parameter set.
    pub fn param(&mut self, t: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, true)
    }

    /// A non-differentiable leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, false)
    }

    pub fn constant_ref(&mut self, t: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2();
        let (k2, n) = self.value(b).dims2();
        if k != k2 {
            return Err(invalid(format!("matmul: inner dims {k} vs {k2}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            0.0,
            &mut out,
        );
        finite_or("matmul", &out)?;
        let tracked = self.tracked(&[a.0, b.0]);
        Ok(self.push(
            Cow::Owned(Tensor::from_parts(vec![m, n], out)),
            Op::MatMul(a.0, b.0),
            tracked,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(invalid(format!(
                "add: shapes {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let out: Vec<f64> = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x + y)
            .collect();
        finite_or("add", &out)?;
        let shape = ta.shape().to_vec();
        let tracked = self.tracked(&[a.0, b.0]);
        Ok(self.push(
            Cow::Owned(Tensor::from_parts(shape, out)),
            Op::Add(a.0, b.0),
            tracked,
        ))
    }

    /// Adds a `1 x n` row to every row of an `m x n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2();
        let r = self.value(row);
        if r.len() != n {
            return Err(invalid(format!(
                "add_row: row of {} for {n} columns",
                r.len()
            )));
        }
        let mut out = self.value(a).data().to_vec();
        for chunk in out.chunks_mut(n) {
            for (o, b) in chunk.iter_mut().zip(r.data()) {
                *o += b;
            }
        }
        finite_or("add_row", &out)?;
        let tracked = self.tracked(&[a.0, row.0]);
        Ok(self.push(
            Cow::Owned(Tensor::from_parts(vec![m, n], out)),
            Op::AddRow(a.0, row.0),
            tracked,
        ))
    }

    fn unary(&mut self, a: Var, name: &'static str, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let t = self.value(a);
        let out: Vec<f64> = t.data().iter().map(|&x| f(x)).collect();
        finite_or(name, &out)?;
        let shape = t.shape().to_vec();
        let tracked = self.nodes[a.0].tracked;
        Ok(self.push(Cow::Owned(Tensor::from_parts(shape, out)), op, tracked))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "tanh", Op::Tanh(a.0), f64::tanh)
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "silu", Op::Silu(a.0), |x| x * sigmoid(x))
    }

    /// Mean of all entries, as a `1 x 1` matrix.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let m = t.data().iter().sum::<f64>() / t.len() as f64;
        finite_or("mean", &[m])?;
        let tracked = self.nodes[a.0].tracked;
        Ok(self.push(
            Cow::Owned(Tensor::from_parts(vec![1, 1], vec![m])),
            Op::Mean(a.0),
            tracked,
        ))
    }

    /// Elementwise `(a - b)^2`.
    pub fn sq_err(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(invalid(format!(
                "sq_err: shapes {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let out: Vec<f64> = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .collect();
        finite_or("sq_err", &out)?;
        let shape = ta.shape().to_vec();
        let tracked = self.tracked(&[a.0, b.0]);
        Ok(self.push(
            Cow::Owned(Tensor::from_parts(shape, out)),
            Op::SqErr(a.0, b.0),
            tracked,
        ))
    }

    /// Mean squared error between two equally shaped tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let e = self.sq_err(a, b)?;
        self.mean(e)
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return Err(invalid("concat of zero parts"));
        };
        let m = self.value(*first).dims2().0;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (r, c) = self.value(*p).dims2();
            if r != m {
                return Err(invalid(format!("concat: row counts {m} vs {r}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(*p).data()[i * w..(i + 1) * w]);
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let tracked = self.tracked(&ids);
        Ok(self.push(
            Cow::Owned(Tensor::from_parts(vec![m, total], out)),
            Op::Concat(ids),
            tracked,
        ))
    }

    /// Adjoints of a scalar node with respect to every node.
    ///
    /// Entries are `None` for nodes the output does not depend on through
    /// tracked leaves.
    pub fn backward(&self, output: Var) -> Result<Vec<Option<Vec<f64>>>> {
        if self.value(output).len() != 1 {
            return Err(invalid("backward needs a scalar output"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(vec![1.0]);

        fn accumulate(slot: &mut Option<Vec<f64>>, delta: Vec<f64>) {
            match slot {
                Some(g) => g.iter_mut().zip(delta).for_each(|(a, b)| *a += b),
                None => *slot = Some(delta),
            }
        }

        for id in (0..=output.0).rev() {
            let Some(up) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.tracked {
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (m, k) = self.nodes[*a].value.dims2();
                    let n = self.nodes[*b].value.dims2().1;
                    if self.nodes[*a].tracked {
                        let mut da = vec![0.0; m * k];
                        gemm(
                            m,
                            n,
                            k,
                            &up,
                            false,
                            self.nodes[*b].value.data(),
                            true,
                            0.0,
                            &mut da,
                        );
                        accumulate(&mut grads[*a], da);
                    }
                    if self.nodes[*b].tracked {
                        let mut db = vec![0.0; k * n];
                        gemm(
                            k,
                            m,
                            n,
                            self.nodes[*a].value.data(),
                            true,
                            &up,
                            false,
                            0.0,
                            &mut db,
                        );
                        accumulate(&mut grads[*b], db);
                    }
                }
                Op::Add(a, b) => {
                    if self.nodes[*a].tracked {
                        accumulate(&mut grads[*a], up.clone());
                    }
                    if self.nodes[*b].tracked {
                        accumulate(&mut grads[*b], up.clone());
                    }
                }
                Op::AddRow(a, r) => {
                    let n = self.nodes[*r].value.len();
                    if self.nodes[*r].tracked {
                        let mut dr = vec![0.0; n];
                        for chunk in up.chunks(n) {
                            dr.iter_mut().zip(chunk).for_each(|(d, u)| *d += u);
                        }
                        accumulate(&mut grads[*r], dr);
                    }
                    if self.nodes[*a].tracked {
                        accumulate(&mut grads[*a], up.clone());
                    }
                }
                Op::Tanh(a) => {
                    let d = node
                        .value
                        .data()
                        .iter()
                        .zip(&up)
                        .map(|(y, u)| u * (1.0 - y * y))
                        .collect();
                    accumulate(&mut grads[*a], d);
                }
                Op::Silu(a) => {
                    let d = self.nodes[*a]
                        .value
                        .data()
                        .iter()
                        .zip(&up)
                        .map(|(&x, u)| {
                            let s = sigmoid(x);
                            u * s * (1.0 + x * (1.0 - s))
                        })
                        .collect();
                    accumulate(&mut grads[*a], d);
                }
                Op::Mean(a) => {
                    let n = self.nodes[*a].value.len();
                    accumulate(&mut grads[*a], vec![up[0] / n as f64; n]);
                }
                Op::SqErr(a, b) => {
                    let (va, vb) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                    let d: Vec<f64> = va
                        .iter()
                        .zip(vb)
                        .zip(&up)
                        .map(|((x, y), u)| 2.0 * (x - y) * u)
                        .collect();
                    if self.nodes[*b].tracked {
                        accumulate(&mut grads[*b], d.iter().map(|v| -v).collect());
                    }
                    if self.nodes[*a].tracked {
                        accumulate(&mut grads[*a], d);
                    }
                }
                Op::Concat(parts) => {
                    let m = node.value.dims2().0;
                    let total = node.value.dims2().1;
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.nodes[p].value.dims2().1;
                        if self.nodes[p].tracked {
                            let mut dp = Vec::with_capacity(m * w);
                            for i in 0..m {
                                dp.extend_from_slice(
                                    &up[i * total + offset..i * total + offset + w],
                                );
                            }
                            accumulate(&mut grads[p], dp);
                        }
                        offset += w;
                    }
                }
            }
            if let Some(g) = &grads[id] {
                finite_or("backward", g)?;
            }
            // Leaves keep their adjoint.
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(up);
            }
        }
        Ok(grads)
    }
}

/// Forward-only evaluation of a scalar computation.
pub fn evaluate<F>(params: &ParamSet, f: F) -> Result<f64>
where
    F: for<'g> Fn(&mut Graph<'g>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.tensors().map(|t| g.param(t)).collect();
    let out = f(&mut g, &vars)?;
    g.value(out)
        .item()
        .ok_or_else(|| invalid("computation must return a scalar"))
}

/// Loss value and exact gradients with respect to every tensor in `params`.
pub fn value_and_grad<F>(params: &ParamSet, f: F) -> Result<(f64, ParamSet)>
where
    F: for<'g> Fn(&mut Graph<'g>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.tensors().map(|t| g.param(t)).collect();
    let out = f(&mut g, &vars)?;
    let value = g
        .value(out)
        .item()
        .ok_or_else(|| invalid("computation must return a scalar"))?;
    let mut adj = g.backward(out)?;
    let mut flat = Vec::with_capacity(params.num_scalars());
    for (v, t) in vars.iter().zip(params.tensors()) {
        match adj[v.0].take() {
            Some(d) => flat.extend(d),
            None => flat.extend(std::iter::repeat_n(0.0, t.len())),
        }
    }
    Ok((value, params.unflatten(&flat)?))
}

/// Central-difference gradient estimate for every scalar coordinate.
pub fn finite_difference<F>(params: &ParamSet, h: f64, f: F) -> Result<ParamSet>
where
    F: for<'g> Fn(&mut Graph<'g>, &[Var]) -> Result<Var>,
{
    let coords: Vec<usize> = (0..params.num_scalars()).collect();
    let est = finite_difference_at(params, h, &coords, &f)?;
    params.unflatten(&est)
}

/// Central differences at selected flat coordinates only.
pub fn finite_difference_at<F>(
    params: &ParamSet,
    h: f64,
    coords: &[usize],
    f: &F,
) -> Result<Vec<f64>>
where
    F: for<'g> Fn(&mut Graph<'g>, &[Var]) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(invalid(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let mut flat = params.flatten();
    let mut out = Vec::with_capacity(coords.len());
    for &i in coords {
        if i >= flat.len() {
            return Err(invalid(format!("coordinate {i} out of range")));
        }
        let orig = flat[i];
        flat[i] = orig + h;
        let fp = evaluate(&params.unflatten(&flat)?, f)?;
        flat[i] = orig - h;
        let fm = evaluate(&params.unflatten(&flat)?, f)?;
        flat[i] = orig;
        out.push((fp - fm) / (2.0 * h));
    }
    Ok(out)
}

/// Central-difference estimate of the derivative along `direction`.
pub fn directional_difference<F>(
    params: &ParamSet,
    h: f64,
    direction: &ParamSet,
    f: &F,
) -> Result<f64>
where
    F: for<'g> Fn(&mut Graph<'g>, &[Var]) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(invalid(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let fp = evaluate(&params.axpy(h, direction)?, f)?;
    let fm = evaluate(&params.axpy(-h, direction)?, f)?;
    Ok((fp - fm) / (2.0 * h))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    fn single(name: &str, shape: Vec<usize>, data: Vec<f64>) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert(name, Tensor::new(shape, data).unwrap()).unwrap();
        p
    }

    fn random_params(rng: &mut ChaCha8Rng, shapes: &[(&str, Vec<usize>)]) -> ParamSet {
        let mut p = ParamSet::new();
        for (name, shape) in shapes {
            let n = shape.iter().product();
            let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            p.insert(*name, Tensor::new(shape.clone(), data).unwrap())
                .unwrap();
        }
        p
    }

    #[test]
    fn square_of_scalar() {
        let p = single("theta", vec![1, 1], vec![3.0]);
        let f = |g: &mut Graph<'_>, v: &[Var]| {
            let z = g.constant(Tensor::scalar(0.0)?);
            g.mse(v[0], z)
        };
        let (val, grad) = value_and_grad(&p, f).unwrap();
        assert_eq!(val, 9.0);
        assert_eq!(grad.flatten(), vec![6.0]);
        let fd = finite_difference(&p, 1e-6, f).unwrap();
        assert!((fd.flatten()[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn squared_norm_of_vector() {
        let p = single("theta", vec![1, 4], vec![1.0, 0.0, -2.0, 3.0]);
        // sum = 4 * mean, scaled through a 1x1 matmul
        let f = |g: &mut Graph<'_>, v: &[Var]| {
            let z = g.constant(Tensor::zeros(&[1, 4]));
            let m = g.mse(v[0], z)?;
            let four = g.constant(Tensor::scalar(4.0)?);
            g.matmul(m, four)
        };
        let (val, grad) = value_and_grad(&p, f).unwrap();
        assert_eq!(val, 14.0);
        assert_eq!(grad.flatten(), vec![2.0, 0.0, -4.0, 6.0]);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let p = single("theta", vec![1, 3], vec![0.5, -1.0, 2.0]);
        let f = |g: &mut Graph<'_>, _v: &[Var]| Ok(g.constant(Tensor::scalar(7.0)?));
        let fd = finite_difference(&p, 1e-6, f).unwrap();
        assert!(fd.flatten().iter().all(|&x| x == 0.0));
        let (_, grad) = value_and_grad(&p, f).unwrap();
        assert!(grad.flatten().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn non_positive_step_rejected() {
        let p = single("theta", vec![1, 1], vec![1.0]);
        let f = |g: &mut Graph<'_>, v: &[Var]| g.mean(v[0]);
        assert!(matches!(
            finite_difference(&p, 0.0, f),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            finite_difference(&p, -1e-3, f),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn overflow_names_the_primitive() {
        let p = single("theta", vec![1, 1], vec![1e200]);
        let f = |g: &mut Graph<'_>, v: &[Var]| g.matmul(v[0], v[0]);
        match value_and_grad(&p, f) {
            Err(Error::NumericalInstability { primitive }) => assert_eq!(primitive, "matmul"),
            other => panic!("expected instability, got {other:?}"),
        }
    }

    /// 2-3-4 perceptron, tanh then SiLU, with two extra inputs concatenated
    /// after the first layer. w1 (6) + b1 (3) + w2 (20) + b2 (4) + s (4) = 37.
    fn perceptron(
        x: Tensor,
        extra: Tensor,
        y: Tensor,
    ) -> impl for<'g> Fn(&mut Graph<'g>, &[Var]) -> Result<Var> {
        move |g: &mut Graph<'_>, v: &[Var]| {
            let xi = g.constant(x.clone());
            let e = g.constant(extra.clone());
            let h = g.matmul(xi, v[0])?;
            let h = g.add_row(h, v[1])?;
            let h = g.tanh(h)?;
            let h = g.concat(&[h, e])?;
            let o = g.matmul(h, v[2])?;
            let o = g.add_row(o, v[3])?;
            let o = g.silu(o)?;
            let s = g.constant(Tensor::zeros(&[1, 4]));
            let scale = g.add(v[4], s)?;
            let rows = g.value(o).dims2().0;
            let ones = g.constant(Tensor::new(vec![1, rows], vec![1.0; rows])?);
            let summed = g.matmul(ones, o)?;
            let scaled = g.add(summed, scale)?;
            let target = g.constant(y.clone());
            g.mse(scaled, target)
        }
    }

    fn perceptron_shapes() -> Vec<(&'static str, Vec<usize>)> {
        vec![
            ("w1", vec![2, 3]),
            ("b1", vec![1, 3]),
            ("w2", vec![5, 4]),
            ("b2", vec![1, 4]),
            ("s", vec![1, 4]),
        ]
    }

    #[test]
    fn perceptron_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let p = random_params(&mut rng, &perceptron_shapes());
            assert_eq!(p.num_scalars(), 37);
            let x = Tensor::new(
                vec![3, 2],
                (0..6).map(|_| rng.random_range(-2.0..2.0)).collect(),
            )
            .unwrap();
            let e = Tensor::new(
                vec![3, 2],
                (0..6).map(|_| rng.random_range(-2.0..2.0)).collect(),
            )
            .unwrap();
            let y = Tensor::new(
                vec![1, 4],
                (0..4).map(|_| rng.random_range(-2.0..2.0)).collect(),
            )
            .unwrap();
            let f = perceptron(x, e, y);
            let (_, grad) = value_and_grad(&p, &f).unwrap();
            let fd = finite_difference(&p, 1e-6, &f).unwrap();
            for (a, b) in grad.flatten().iter().zip(fd.flatten()) {
                assert!(rel_err(*a, b) < 1e-5 || (a - b).abs() < 1e-9, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn gradient_is_linear_in_the_objective() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let p = random_params(&mut rng, &perceptron_shapes());
            let mk = |rng: &mut ChaCha8Rng| {
                let x = Tensor::new(
                    vec![3, 2],
                    (0..6).map(|_| rng.random_range(-2.0..2.0)).collect(),
                )
                .unwrap();
                let e = Tensor::new(
                    vec![3, 2],
                    (0..6).map(|_| rng.random_range(-2.0..2.0)).collect(),
                )
                .unwrap();
                let y = Tensor::new(
                    vec![1, 4],
                    (0..4).map(|_| rng.random_range(-2.0..2.0)).collect(),
                )
                .unwrap();
                perceptron(x, e, y)
            };
            let (f, h) = (mk(&mut rng), mk(&mut rng));
            let (a, b) = (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
            let combo = |g: &mut Graph<'_>, v: &[Var]| {
                let fv = f(g, v)?;
                let hv = h(g, v)?;
                let ca = g.constant(Tensor::scalar(a)?);
                let cb = g.constant(Tensor::scalar(b)?);
                let fa = g.matmul(fv, ca)?;
                let hb = g.matmul(hv, cb)?;
                g.add(fa, hb)
            };
            let (_, gc) = value_and_grad(&p, combo).unwrap();
            let (_, gf) = value_and_grad(&p, &f).unwrap();
            let (_, gh) = value_and_grad(&p, &h).unwrap();
            let expect = gf
                .flatten()
                .iter()
                .zip(gh.flatten())
                .map(|(x, y)| a * x + b * y)
                .collect::<Vec<_>>();
            for (x, y) in gc.flatten().iter().zip(expect) {
                assert!(
                    (x - y).abs() <= 1e-10 * x.abs().max(y.abs()).max(1.0),
                    "{x} vs {y}"
                );
            }
        }
    }

    #[test]
    fn repeated_evaluation_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = random_params(&mut rng, &perceptron_shapes());
        let x = Tensor::new(vec![3, 2], vec![0.1, 0.2, 0.3, -0.4, 0.5, 0.6]).unwrap();
        let f = perceptron(x.clone(), x, Tensor::zeros(&[1, 4]));
        let a = value_and_grad(&p, &f).unwrap();
        let b = value_and_grad(&p, &f).unwrap();
        assert_eq!(a.0.to_bits(), b.0.to_bits());
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn transposed_gemm_paths_agree_with_naive() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [1.0, 0.5, -1.0, 2.0, 0.0, 1.0]; // 3x2
        let mut c = [0.0; 4];
        gemm(2, 3, 2, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, [-1.0, 7.5, -1.0, 18.0]);
        // a^T stored as 3x2 gives the same a when transposed
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let mut c2 = [0.0; 4];
        gemm(2, 3, 2, &at, true, &b, false, 0.0, &mut c2);
        assert_eq!(c, c2);
    }
}
