//! Tape-based reverse-mode autodiff over channel-first tensors.
//!
//! A tensor has shape `[C, s_1, .., s_D]` with `D` in {2, 3} spatial axes
//! (scalars are `[1]`). Nodes are appended in evaluation order, so the
//! backward pass is a single reverse sweep over the tape.

use crate::error::{NetError, Result};
use crate::real::Real;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
struct ConvGeom {
    cin: usize,
    cout: usize,
    inp: [usize; 3],
    out: [usize; 3],
    k: [usize; 3],
    pad: [usize; 3],
    stride: [usize; 3],
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.cin * self.k.iter().product::<usize>()
    }

    fn n_out(&self) -> usize {
        self.out.iter().product()
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv {
        x: usize,
        w: usize,
        b: usize,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    LeakyRelu {
        x: usize,
        slope: T,
    },
    Resize {
        x: usize,
        axis: usize,
        table: Vec<(usize, usize, T)>,
    },
    Concat {
        a: usize,
        b: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Scale {
        x: usize,
        s: T,
    },
    Warp {
        src: usize,
        disp: usize,
    },
    SoftDice {
        x: usize,
        target: Vec<T>,
    },
    Smoothness {
        x: usize,
    },
    Mse {
        x: usize,
        target: Vec<T>,
    },
    Weighted {
        a: usize,
        b: usize,
        wa: T,
        wb: T,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Vec<T>,
    shape: Vec<usize>,
    op: Op<T>,
}

#[derive(Debug, Default)]
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

/// Gradients of one scalar with respect to every node of a graph.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    /// `None` when `v` does not influence the differentiated scalar.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// Spatial extents padded to three axes with leading singletons.
fn spatial3(shape: &[usize]) -> [usize; 3] {
    let sp = &shape[1..];
    let mut out = [1; 3];
    out[3 - sp.len()..].copy_from_slice(sp);
    out
}

fn shape_err(msg: String) -> NetError {
    NetError::Shape(msg)
}

/// Corner-aligned interpolation table from `src` to `dst` samples.
fn axis_table<T: Real>(src: usize, dst: usize) -> Vec<(usize, usize, T)> {
    (0..dst)
        .map(|i| {
            if src == 1 || dst == 1 {
                return (0, 0, T::zero());
            }
            let pos = i as f64 * (src - 1) as f64 / (dst - 1) as f64;
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            (lo, hi, T::of(pos - lo as f64))
        })
        .collect()
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let [i0, i1, i2] = g.inp;
    let [o0, o1, o2] = g.out;
    let n_out = g.n_out();
    let mut row = 0;
    for ci in 0..g.cin {
        let xc = &x[ci * i0 * i1 * i2..(ci + 1) * i0 * i1 * i2];
        for k0 in 0..g.k[0] {
            for k1 in 0..g.k[1] {
                for k2 in 0..g.k[2] {
                    let dst = &mut cols[row * n_out..(row + 1) * n_out];
                    for a in 0..o0 {
                        let z = (a * g.stride[0] + k0) as isize - g.pad[0] as isize;
                        for b in 0..o1 {
                            let y = (b * g.stride[1] + k1) as isize - g.pad[1] as isize;
                            let line = &mut dst[(a * o1 + b) * o2..(a * o1 + b + 1) * o2];
                            if z < 0 || z >= i0 as isize || y < 0 || y >= i1 as isize {
                                line.fill(T::zero());
                                continue;
                            }
                            let src = &xc[(z as usize * i1 + y as usize) * i2..][..i2];
                            for (c, out) in line.iter_mut().enumerate() {
                                let xx = (c * g.stride[2] + k2) as isize - g.pad[2] as isize;
                                *out = if xx >= 0 && xx < i2 as isize {
                                    src[xx as usize]
                                } else {
                                    T::zero()
                                };
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], g: &ConvGeom, x: &mut [T]) {
    let [i0, i1, i2] = g.inp;
    let [o0, o1, o2] = g.out;
    let n_out = g.n_out();
    let mut row = 0;
    for ci in 0..g.cin {
        let xc = &mut x[ci * i0 * i1 * i2..(ci + 1) * i0 * i1 * i2];
        for k0 in 0..g.k[0] {
            for k1 in 0..g.k[1] {
                for k2 in 0..g.k[2] {
                    let src = &cols[row * n_out..(row + 1) * n_out];
                    for a in 0..o0 {
                        let z = (a * g.stride[0] + k0) as isize - g.pad[0] as isize;
                        if z < 0 || z >= i0 as isize {
                            continue;
                        }
                        for b in 0..o1 {
                            let y = (b * g.stride[1] + k1) as isize - g.pad[1] as isize;
                            if y < 0 || y >= i1 as isize {
                                continue;
                            }
                            let line = &src[(a * o1 + b) * o2..(a * o1 + b + 1) * o2];
                            let dst = &mut xc[(z as usize * i1 + y as usize) * i2..][..i2];
                            for (c, &v) in line.iter().enumerate() {
                                let xx = (c * g.stride[2] + k2) as isize - g.pad[2] as isize;
                                if xx >= 0 && xx < i2 as isize {
                                    dst[xx as usize] += v;
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Per-voxel corner data of a multilinear lookup at `x + u(x)`.
struct Lookup<T> {
    base: [isize; 3],
    frac: [T; 3],
}

fn lookup<T: Real>(disp: &[T], d: usize, n: usize, vox: usize, coord: [usize; 3]) -> Lookup<T> {
    let mut base = [0isize; 3];
    let mut frac = [T::zero(); 3];
    for a in 0..3 {
        base[a] = coord[a] as isize;
    }
    for c in 0..d {
        let pa = 3 - d + c;
        let p = T::of(coord[pa] as f64) + disp[c * n + vox];
        let fl = p.floor();
        base[pa] = fl.to_isize().unwrap_or(isize::MIN / 2);
        frac[pa] = p - fl;
    }
    Lookup { base, frac }
}

/// Index and weight of one corner, or `None` when it lies outside.
#[allow(clippy::needless_range_loop)]
fn corner<T: Real>(l: &Lookup<T>, d: usize, dims: [usize; 3], bits: usize) -> Option<(usize, T)> {
    let mut w = T::one();
    let mut idx = 0usize;
    for pa in 0..3 {
        let mut i = l.base[pa];
        if pa >= 3 - d {
            let bit = (bits >> (pa - (3 - d))) & 1;
            i += bit as isize;
            w *= if bit == 1 {
                l.frac[pa]
            } else {
                T::one() - l.frac[pa]
            };
        }
        if i < 0 || i >= dims[pa] as isize {
            return None;
        }
        idx = idx * dims[pa] + i as usize;
    }
    Some((idx, w))
}

fn unravel(v: usize, dims: [usize; 3]) -> [usize; 3] {
    [
        v / (dims[1] * dims[2]),
        (v / dims[2]) % dims[1],
        v % dims[2],
    ]
}

/// Forward difference along padded axis `pa` at voxel `v`, backward on the
/// last sample and zero on singleton axes; returns the (from, to) pair.
fn diff_pair(v: usize, coord: [usize; 3], dims: [usize; 3], pa: usize) -> Option<(usize, usize)> {
    let n = dims[pa];
    if n == 1 {
        return None;
    }
    let stride: usize = dims[pa + 1..].iter().product();
    if coord[pa] + 1 < n {
        Some((v, v + stride))
    } else {
        Some((v - stride, v))
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<T>, shape: Vec<usize>, op: Op<T>) -> Var {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        self.nodes.push(Node { value, shape, op });
        Var(self.nodes.len() - 1)
    }

    /// Input or parameter tensor.
    pub fn leaf(&mut self, value: Vec<T>, shape: &[usize]) -> Result<Var> {
        if value.len() != shape.iter().product::<usize>() || shape.is_empty() {
            return Err(shape_err(format!(
                "{} values for shape {shape:?}",
                value.len()
            )));
        }
        Ok(self.push(value, shape.to_vec(), Op::Leaf))
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    fn spatial_tensor(&self, v: Var, what: &str) -> Result<&[usize]> {
        let s = self.shape(v);
        if !(3..=4).contains(&s.len()) {
            return Err(shape_err(format!(
                "{what}: expected [C, spatial..], got {s:?}"
            )));
        }
        Ok(s)
    }

    /// "Same"-padded convolution with odd kernels `w: [Cout, Cin, k..]`,
    /// bias `b: [Cout]` and an isotropic stride.
    pub fn conv(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let xs = self.spatial_tensor(x, "conv input")?.to_vec();
        let ws = self.shape(w).to_vec();
        let d = xs.len() - 1;
        if ws.len() != d + 2 || ws[1] != xs[0] || self.shape(b) != [ws[0]] {
            return Err(shape_err(format!(
                "conv: input {xs:?}, kernel {ws:?}, bias {:?}",
                self.shape(b)
            )));
        }
        if ws[2..].iter().any(|k| k % 2 == 0) || stride == 0 {
            return Err(shape_err(format!(
                "conv: kernel {ws:?} must be odd, stride {stride}"
            )));
        }
        let inp = spatial3(&xs);
        let mut k = [1; 3];
        k[3 - d..].copy_from_slice(&ws[2..]);
        let mut st = [1; 3];
        let mut pad = [0; 3];
        let mut out = [1; 3];
        for a in 3 - d..3 {
            st[a] = stride;
            pad[a] = k[a] / 2;
            out[a] = (inp[a] + 2 * pad[a] - k[a]) / stride + 1;
        }
        let geom = ConvGeom {
            cin: xs[0],
            cout: ws[0],
            inp,
            out,
            k,
            pad,
            stride: st,
        };
        let (rows, n_out) = (geom.rows(), geom.n_out());
        let mut cols = vec![T::zero(); rows * n_out];
        im2col(self.value(x), &geom, &mut cols);
        let mut y = vec![T::zero(); geom.cout * n_out];
        for (co, chunk) in y.chunks_exact_mut(n_out).enumerate() {
            chunk.fill(self.value(b)[co]);
        }
        T::gemm(
            geom.cout,
            rows,
            n_out,
            T::one(),
            self.value(w),
            (rows, 1),
            &cols,
            (n_out, 1),
            T::one(),
            &mut y,
            (n_out, 1),
        );
        let mut shape = vec![geom.cout];
        shape.extend_from_slice(&out[3 - d..]);
        Ok(self.push(
            y,
            shape,
            Op::Conv {
                x: x.0,
                w: w.0,
                b: b.0,
                geom,
                cols,
            },
        ))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let slope = T::of(slope);
        let y = self
            .value(x)
            .iter()
            .map(|&v| if v >= T::zero() { v } else { v * slope })
            .collect();
        let shape = self.shape(x).to_vec();
        self.push(y, shape, Op::LeakyRelu { x: x.0, slope })
    }

    fn resize_axis(&mut self, x: Var, pa: usize, to: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let d = xs.len() - 1;
        let sp = spatial3(&xs);
        let from = sp[pa];
        let table = axis_table::<T>(from, to);
        let outer = xs[0] * sp[..pa].iter().product::<usize>();
        let inner: usize = sp[pa + 1..].iter().product();
        let src = self.value(x);
        let mut y = vec![T::zero(); outer * to * inner];
        for o in 0..outer {
            for (j, &(lo, hi, t)) in table.iter().enumerate() {
                let a = &src[(o * from + lo) * inner..][..inner];
                let b = &src[(o * from + hi) * inner..][..inner];
                let dst = &mut y[(o * to + j) * inner..][..inner];
                for i in 0..inner {
                    dst[i] = a[i] + t * (b[i] - a[i]);
                }
            }
        }
        let mut shape = xs;
        shape[1 + pa - (3 - d)] = to;
        self.push(
            y,
            shape,
            Op::Resize {
                x: x.0,
                axis: pa,
                table,
            },
        )
    }

    /// Corner-aligned multilinear resampling of the spatial axes.
    pub fn resize(&mut self, x: Var, target: &[usize]) -> Result<Var> {
        let xs = self.spatial_tensor(x, "resize")?.to_vec();
        let d = xs.len() - 1;
        if target.len() != d || target.contains(&0) {
            return Err(shape_err(format!("resize {xs:?} to {target:?}")));
        }
        let mut cur = x;
        for (a, &t) in target.iter().enumerate() {
            if xs[1 + a] != t {
                cur = self.resize_axis(cur, 3 - d + a, t);
            }
        }
        Ok(cur)
    }

    /// Channel concatenation.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != sb.len() || sa[1..] != sb[1..] {
            return Err(shape_err(format!("concat {sa:?} with {sb:?}")));
        }
        let mut y = self.value(a).to_vec();
        y.extend_from_slice(self.value(b));
        let mut shape = sa;
        shape[0] += sb[0];
        Ok(self.push(y, shape, Op::Concat { a: a.0, b: b.0 }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(format!(
                "add {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let y = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&p, &q)| p + q)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(y, shape, Op::Add { a: a.0, b: b.0 }))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let s = T::of(s);
        let y = self.value(x).iter().map(|&v| v * s).collect();
        let shape = self.shape(x).to_vec();
        self.push(y, shape, Op::Scale { x: x.0, s })
    }

    /// Samples `src` at `x + disp(x)` with multilinear interpolation; corners
    /// outside the grid contribute zero. `disp` has one channel per spatial
    /// axis, in axis order.
    pub fn warp(&mut self, src: Var, disp: Var) -> Result<Var> {
        let ss = self.spatial_tensor(src, "warp source")?.to_vec();
        let ds = self.shape(disp).to_vec();
        let d = ss.len() - 1;
        if ds.len() != ss.len() || ds[0] != d || ds[1..] != ss[1..] {
            return Err(shape_err(format!("warp {ss:?} by {ds:?}")));
        }
        let dims = spatial3(&ss);
        let n: usize = dims.iter().product();
        let c = ss[0];
        let (sv, dv) = (self.value(src), self.value(disp));
        let mut y = vec![T::zero(); c * n];
        for vox in 0..n {
            let l = lookup(dv, d, n, vox, unravel(vox, dims));
            for bits in 0..1 << d {
                if let Some((idx, w)) = corner(&l, d, dims, bits) {
                    for ch in 0..c {
                        y[ch * n + vox] += w * sv[ch * n + idx];
                    }
                }
            }
        }
        Ok(self.push(
            y,
            ss,
            Op::Warp {
                src: src.0,
                disp: disp.0,
            },
        ))
    }

    /// `-2/C * sum_c |x_c . t_c| / (|x_c| + |t_c|)`, with channels empty in
    /// both operands contributing zero.
    pub fn soft_dice(&mut self, x: Var, target: Vec<T>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if target.len() != self.value(x).len() {
            return Err(shape_err(format!(
                "soft dice target of {} values for {xs:?}",
                target.len()
            )));
        }
        let (inter, sums) = dice_sums(self.value(x), &target, xs[0]);
        let ratio: f64 = inter
            .iter()
            .zip(&sums)
            .map(|(&i, &s)| if s > 0.0 { i / s } else { 0.0 })
            .sum();
        let loss = -2.0 * ratio / xs[0] as f64;
        Ok(self.push(vec![T::of(loss)], vec![1], Op::SoftDice { x: x.0, target }))
    }

    /// `0.5 * mean |grad u|^2` over voxels, components and axes of a
    /// displacement `u: [D, spatial..]`.
    pub fn smoothness(&mut self, u: Var) -> Result<Var> {
        let us = self.spatial_tensor(u, "smoothness")?.to_vec();
        let d = us.len() - 1;
        if us[0] != d {
            return Err(shape_err(format!(
                "smoothness expects {d} channels, got {us:?}"
            )));
        }
        let dims = spatial3(&us);
        let n: usize = dims.iter().product();
        let v = self.value(u);
        let mut acc = 0f64;
        for vox in 0..n {
            let coord = unravel(vox, dims);
            for c in 0..d {
                let ch = &v[c * n..(c + 1) * n];
                for pa in 3 - d..3 {
                    if let Some((p, q)) = diff_pair(vox, coord, dims, pa) {
                        let g = (ch[q] - ch[p]).as_f64();
                        acc += g * g;
                    }
                }
            }
        }
        let loss = 0.5 * acc / (n * d * d) as f64;
        Ok(self.push(vec![T::of(loss)], vec![1], Op::Smoothness { x: u.0 }))
    }

    /// Mean squared difference to a constant target.
    pub fn mse(&mut self, x: Var, target: Vec<T>) -> Result<Var> {
        let v = self.value(x);
        if target.len() != v.len() {
            return Err(shape_err(format!(
                "mse target of {} values for {}",
                target.len(),
                v.len()
            )));
        }
        let acc: f64 = v
            .iter()
            .zip(&target)
            .map(|(&a, &b)| (a.as_f64() - b.as_f64()).powi(2))
            .sum();
        let loss = acc / v.len() as f64;
        Ok(self.push(vec![T::of(loss)], vec![1], Op::Mse { x: x.0, target }))
    }

    /// `wa * a + wb * b` for scalars.
    pub fn weighted(&mut self, a: Var, b: Var, wa: f64, wb: f64) -> Result<Var> {
        if self.shape(a) != [1] || self.shape(b) != [1] {
            return Err(shape_err("weighted sum of non-scalars".into()));
        }
        let (wa, wb) = (T::of(wa), T::of(wb));
        let y = wa * self.scalar(a) + wb * self.scalar(b);
        Ok(self.push(
            vec![y],
            vec![1],
            Op::Weighted {
                a: a.0,
                b: b.0,
                wa,
                wb,
            },
        ))
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.shape(loss), [1], "backward needs a scalar");
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn backprop(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        match &node.op {
            Op::Leaf => {}
            Op::Conv {
                x,
                w,
                b,
                geom,
                cols,
            } => {
                let (rows, n_out) = (geom.rows(), geom.n_out());
                T::gemm(
                    geom.cout,
                    n_out,
                    rows,
                    T::one(),
                    g,
                    (n_out, 1),
                    cols,
                    (1, n_out),
                    T::one(),
                    slot(grads, nodes, *w),
                    (rows, 1),
                );
                let gb = slot(grads, nodes, *b);
                for (co, chunk) in g.chunks_exact(n_out).enumerate() {
                    let mut s = T::zero();
                    for &v in chunk {
                        s += v;
                    }
                    gb[co] += s;
                }
                let mut dcols = vec![T::zero(); rows * n_out];
                T::gemm(
                    rows,
                    geom.cout,
                    n_out,
                    T::one(),
                    &nodes[*w].value,
                    (1, rows),
                    g,
                    (n_out, 1),
                    T::zero(),
                    &mut dcols,
                    (n_out, 1),
                );
                col2im(&dcols, geom, slot(grads, nodes, *x));
            }
            Op::LeakyRelu { x, slope } => {
                let xv = &nodes[*x].value;
                let gx = slot(grads, nodes, *x);
                for k in 0..g.len() {
                    gx[k] += if xv[k] >= T::zero() {
                        g[k]
                    } else {
                        g[k] * *slope
                    };
                }
            }
            Op::Resize { x, axis, table } => {
                let xs = &nodes[*x].shape;
                let sp = spatial3(xs);
                let from = sp[*axis];
                let to = table.len();
                let outer = xs[0] * sp[..*axis].iter().product::<usize>();
                let inner: usize = sp[*axis + 1..].iter().product();
                let gx = slot(grads, nodes, *x);
                for o in 0..outer {
                    for (j, &(lo, hi, t)) in table.iter().enumerate() {
                        let src = &g[(o * to + j) * inner..][..inner];
                        for (k, &v) in src.iter().enumerate() {
                            gx[(o * from + lo) * inner + k] += (T::one() - t) * v;
                            gx[(o * from + hi) * inner + k] += t * v;
                        }
                    }
                }
            }
            Op::Concat { a, b } => {
                let na = nodes[*a].value.len();
                for (dst, &v) in slot(grads, nodes, *a).iter_mut().zip(&g[..na]) {
                    *dst += v;
                }
                for (dst, &v) in slot(grads, nodes, *b).iter_mut().zip(&g[na..]) {
                    *dst += v;
                }
            }
            Op::Add { a, b } => {
                for j in [*a, *b] {
                    for (dst, &v) in slot(grads, nodes, j).iter_mut().zip(g) {
                        *dst += v;
                    }
                }
            }
            Op::Scale { x, s } => {
                for (dst, &v) in slot(grads, nodes, *x).iter_mut().zip(g) {
                    *dst += v * *s;
                }
            }
            Op::Warp { src, disp } => {
                let ss = &nodes[*src].shape;
                let d = ss.len() - 1;
                let dims = spatial3(ss);
                let n: usize = dims.iter().product();
                let c = ss[0];
                let (sv, dv) = (&nodes[*src].value, &nodes[*disp].value);
                let mut gsrc = vec![T::zero(); sv.len()];
                let mut gdisp = vec![T::zero(); dv.len()];
                for vox in 0..n {
                    let l = lookup(dv, d, n, vox, unravel(vox, dims));
                    for bits in 0..1 << d {
                        let Some((idx, w)) = corner(&l, d, dims, bits) else {
                            continue;
                        };
                        // sum_c g_c * src_c at this corner drives the position gradient
                        let mut gs = T::zero();
                        for ch in 0..c {
                            let go = g[ch * n + vox];
                            gsrc[ch * n + idx] += w * go;
                            gs += go * sv[ch * n + idx];
                        }
                        for a in 0..d {
                            let pa = 3 - d + a;
                            let mut dw = T::one();
                            for pb in 3 - d..3 {
                                let bit = (bits >> (pb - (3 - d))) & 1;
                                let f = l.frac[pb];
                                dw *= if pb == pa {
                                    if bit == 1 {
                                        T::one()
                                    } else {
                                        -T::one()
                                    }
                                } else if bit == 1 {
                                    f
                                } else {
                                    T::one() - f
                                };
                            }
                            gdisp[a * n + vox] += dw * gs;
                        }
                    }
                }
                for (dst, v) in slot(grads, nodes, *src).iter_mut().zip(gsrc) {
                    *dst += v;
                }
                for (dst, v) in slot(grads, nodes, *disp).iter_mut().zip(gdisp) {
                    *dst += v;
                }
            }
            Op::SoftDice { x, target } => {
                let c = nodes[*x].shape[0];
                let xv = &nodes[*x].value;
                let (inter, sums) = dice_sums(xv, target, c);
                let n = xv.len() / c;
                let g0 = g[0].as_f64();
                let gx = slot(grads, nodes, *x);
                for ch in 0..c {
                    let s = sums[ch];
                    if s <= 0.0 {
                        continue;
                    }
                    let k = -2.0 / c as f64 * g0 / (s * s);
                    for v in 0..n {
                        let t = target[ch * n + v].as_f64();
                        gx[ch * n + v] += T::of(k * (t * s - inter[ch]));
                    }
                }
            }
            Op::Smoothness { x } => {
                let us = &nodes[*x].shape;
                let d = us.len() - 1;
                let dims = spatial3(us);
                let n: usize = dims.iter().product();
                let v = &nodes[*x].value;
                let k = g[0] * T::of(1.0 / (n * d * d) as f64);
                let gx = slot(grads, nodes, *x);
                for vox in 0..n {
                    let coord = unravel(vox, dims);
                    for c in 0..d {
                        for pa in 3 - d..3 {
                            if let Some((p, q)) = diff_pair(vox, coord, dims, pa) {
                                let diff = v[c * n + q] - v[c * n + p];
                                gx[c * n + q] += k * diff;
                                gx[c * n + p] -= k * diff;
                            }
                        }
                    }
                }
            }
            Op::Mse { x, target } => {
                let xv = &nodes[*x].value;
                let k = g[0] * T::of(2.0 / xv.len() as f64);
                let gx = slot(grads, nodes, *x);
                for j in 0..xv.len() {
                    gx[j] += k * (xv[j] - target[j]);
                }
            }
            Op::Weighted { a, b, wa, wb } => {
                slot(grads, nodes, *a)[0] += *wa * g[0];
                slot(grads, nodes, *b)[0] += *wb * g[0];
            }
        }
    }
}

fn slot<'a, T: Real>(
    grads: &'a mut [Option<Vec<T>>],
    nodes: &[Node<T>],
    j: usize,
) -> &'a mut Vec<T> {
    grads[j].get_or_insert_with(|| vec![T::zero(); nodes[j].value.len()])
}

fn dice_sums<T: Real>(x: &[T], t: &[T], c: usize) -> (Vec<f64>, Vec<f64>) {
    let n = x.len() / c;
    let mut inter = vec![0f64; c];
    let mut sums = vec![0f64; c];
    for ch in 0..c {
        for v in ch * n..(ch + 1) * n {
            let (a, b) = (x[v].as_f64(), t[v].as_f64());
            inter[ch] += a * b;
            sums[ch] += a + b;
        }
    }
    (inter, sums)
}
