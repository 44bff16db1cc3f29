use std::rc::Rc;

use crate::autodiff::kernels as k;
use crate::autodiff::kernels::{Border, ConvSpec};
use crate::autodiff::tensor::{Param, Tensor};
use crate::error::{Error, Result};

pub use crate::autodiff::kernels::Border as BorderMode;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Val(usize);

#[derive(Debug)]
enum Op {
    Leaf {
        source: Option<Param>,
    },
    Add {
        a: Val,
        b: Val,
    },
    Mul {
        a: Val,
        b: Val,
    },
    Scale {
        x: Val,
        factor: f64,
    },
    Matmul {
        a: Val,
        b: Val,
        m: usize,
        k: usize,
        n: usize,
    },
    Conv2d {
        x: Val,
        w: Val,
        bias: Option<Val>,
        spec: ConvSpec,
    },
    Exp {
        x: Val,
    },
    Softplus {
        x: Val,
    },
    ZohPhi {
        x: Val,
    },
    Softmax {
        x: Val,
        axis: usize,
    },
    LayerNorm {
        x: Val,
        axis: usize,
        eps: f64,
    },
    GatherBilinear {
        src: Val,
        coords: Val,
        weights: Option<Val>,
        h: usize,
        w: usize,
        border: Border,
    },
    ScatterAdd {
        src: Val,
        index: Rc<Vec<Option<usize>>>,
    },
    Reshape {
        x: Val,
    },
    Permute {
        x: Val,
        axes: Vec<usize>,
    },
    SliceAxis0 {
        x: Val,
        start: usize,
    },
    ConcatAxis0 {
        xs: Vec<Val>,
    },
    UpsampleNearest {
        x: Val,
        factor: usize,
    },
    ReduceSum {
        x: Val,
    },
    CrossEntropy {
        logits: Val,
        targets: Rc<Vec<usize>>,
        mask: Option<Rc<Vec<bool>>>,
    },
    SsmScan {
        a_bar: Val,
        bx: Val,
        c: Val,
        h0: Rc<Vec<f64>>,
        h_traj: Rc<Vec<f64>>,
        l: usize,
        d: usize,
        n: usize,
    },
}

/// Define-by-run record of primitive operations.
///
/// Nodes only ever reference earlier nodes, so replaying the record backward
/// visits them in reverse topological order. A tape is built per forward pass
/// and discarded after `backward`.
pub struct Tape {
    shapes: Vec<Vec<usize>>,
    datas: Vec<Vec<f64>>,
    grads: Vec<Vec<f64>>,
    needs: Vec<bool>,
    ops: Vec<Op>,
    strict: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            shapes: Vec::new(),
            datas: Vec::new(),
            grads: Vec::new(),
            needs: Vec::new(),
            ops: Vec::new(),
            strict: false,
        }
    }

    /// A tape that rejects non-finite values at every node.
    pub fn strict() -> Tape {
        let mut t = Tape::new();
        t.strict = true;
        t
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn shape(&self, v: Val) -> &[usize] {
        &self.shapes[v.0]
    }

    pub fn data(&self, v: Val) -> &[f64] {
        &self.datas[v.0]
    }

    /// Gradient buffer of a node (zeros before `backward`); empty slice when
    /// the node does not participate in differentiation.
    pub fn grad(&self, v: Val) -> &[f64] {
        &self.grads[v.0]
    }

    pub fn scalar(&self, v: Val) -> f64 {
        debug_assert_eq!(self.datas[v.0].len(), 1);
        self.datas[v.0][0]
    }

    pub fn to_tensor(&self, v: Val) -> Tensor {
        Tensor::new(self.shapes[v.0].clone(), self.datas[v.0].clone()).expect("node invariant")
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, needs: bool) -> Result<Val> {
        debug_assert_eq!(k::numel(&shape), data.len());
        if self.strict && !data.iter().all(|v| v.is_finite()) {
            return Err(Error::numerics(format!(
                "non-finite value produced at tape node {}",
                self.ops.len()
            )));
        }
        self.grads.push(if needs { vec![0.0; data.len()] } else { Vec::new() });
        self.shapes.push(shape);
        self.datas.push(data);
        self.needs.push(needs);
        self.ops.push(op);
        Ok(Val(self.ops.len() - 1))
    }

    fn needs(&self, v: Val) -> bool {
        self.needs[v.0]
    }

    // -- leaves ------------------------------------------------------------

    /// Leases a shared tensor onto the tape. If it requires gradients,
    /// `backward` accumulates into its `grad` buffer.
    pub fn value(&mut self, p: &Param) -> Val {
        let t = p.borrow();
        let needs = t.requires_grad;
        let shape = t.shape().to_vec();
        let data = t.data().to_vec();
        drop(t);
        self.push(shape, data, Op::Leaf { source: Some(p.clone()) }, needs)
            .expect("leaf finite-checked by caller context")
    }

    /// A constant tensor that never receives gradients.
    pub fn literal(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Val> {
        if k::numel(&shape) != data.len() {
            return Err(Error::shape(format!(
                "literal data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        self.push(shape, data, Op::Leaf { source: None }, false)
    }

    pub fn literal_scalar(&mut self, value: f64) -> Val {
        self.push(vec![], vec![value], Op::Leaf { source: None }, false)
            .expect("scalar literal")
    }

    // -- elementwise -------------------------------------------------------

    pub fn add(&mut self, a: Val, b: Val) -> Result<Val> {
        let shape = k::broadcast_shape(self.shape(a), self.shape(b))?;
        let mut out = vec![0.0; k::numel(&shape)];
        {
            let (da, db) = (&self.datas[a.0], &self.datas[b.0]);
            k::for_each_broadcast(&shape, &self.shapes[a.0], &self.shapes[b.0], |o, ia, ib| {
                out[o] = da[ia] + db[ib];
            });
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(shape, out, Op::Add { a, b }, needs)
    }

    pub fn mul(&mut self, a: Val, b: Val) -> Result<Val> {
        let shape = k::broadcast_shape(self.shape(a), self.shape(b))?;
        let mut out = vec![0.0; k::numel(&shape)];
        {
            let (da, db) = (&self.datas[a.0], &self.datas[b.0]);
            k::for_each_broadcast(&shape, &self.shapes[a.0], &self.shapes[b.0], |o, ia, ib| {
                out[o] = da[ia] * db[ib];
            });
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(shape, out, Op::Mul { a, b }, needs)
    }

    pub fn scale(&mut self, x: Val, factor: f64) -> Result<Val> {
        let data = self.datas[x.0].iter().map(|v| v * factor).collect();
        let needs = self.needs(x);
        self.push(self.shapes[x.0].clone(), data, Op::Scale { x, factor }, needs)
    }

    pub fn exp(&mut self, x: Val) -> Result<Val> {
        let data = self.datas[x.0].iter().map(|v| v.exp()).collect();
        let needs = self.needs(x);
        self.push(self.shapes[x.0].clone(), data, Op::Exp { x }, needs)
    }

    pub fn softplus(&mut self, x: Val) -> Result<Val> {
        let data = self.datas[x.0].iter().map(|&v| k::softplus(v)).collect();
        let needs = self.needs(x);
        self.push(self.shapes[x.0].clone(), data, Op::Softplus { x }, needs)
    }

    /// Elementwise zero-order-hold coefficient (e^z - 1)/z.
    pub fn zoh_phi(&mut self, x: Val) -> Result<Val> {
        let data = self.datas[x.0].iter().map(|&v| k::zoh_phi(v)).collect();
        let needs = self.needs(x);
        self.push(self.shapes[x.0].clone(), data, Op::ZohPhi { x }, needs)
    }

    // -- linear algebra ----------------------------------------------------

    pub fn matmul(&mut self, a: Val, b: Val) -> Result<Val> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(format!(
                "matmul expects [m,k]x[k,n], got {:?} x {:?}",
                sa, sb
            )));
        }
        let (m, kk, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        k::matmul(&self.datas[a.0], &self.datas[b.0], m, kk, n, &mut out);
        let needs = self.needs(a) || self.needs(b);
        self.push(vec![m, n], out, Op::Matmul { a, b, m, k: kk, n }, needs)
    }

    pub fn conv2d(
        &mut self,
        x: Val,
        w: Val,
        bias: Option<Val>,
        stride: usize,
        pad: usize,
    ) -> Result<Val> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 3 || sw.len() != 4 || sx[0] != sw[1] {
            return Err(Error::shape(format!(
                "conv2d expects x [cin,h,w], w [cout,cin,kh,kw]; got {:?}, {:?}",
                sx, sw
            )));
        }
        if let Some(b) = bias {
            let sb = self.shape(b);
            if sb != [sw[0]] {
                return Err(Error::shape(format!(
                    "conv2d bias shape {:?} does not match cout {}",
                    sb, sw[0]
                )));
            }
        }
        let spec = ConvSpec {
            cin: sx[0],
            cout: sw[0],
            h: sx[1],
            w: sx[2],
            kh: sw[2],
            kw: sw[3],
            stride,
            pad,
        };
        let (ho, wo) = spec.out_hw()?;
        let mut out = vec![0.0; spec.cout * ho * wo];
        k::conv2d_forward(
            &self.datas[x.0],
            &self.datas[w.0],
            bias.map(|b| self.datas[b.0].as_slice()),
            &spec,
            &mut out,
        );
        let needs =
            self.needs(x) || self.needs(w) || bias.map(|b| self.needs(b)).unwrap_or(false);
        self.push(vec![spec.cout, ho, wo], out, Op::Conv2d { x, w, bias, spec }, needs)
    }

    // -- normalization -----------------------------------------------------

    pub fn softmax(&mut self, x: Val, axis: usize) -> Result<Val> {
        let shape = self.shapes[x.0].clone();
        if axis >= shape.len() {
            return Err(Error::shape(format!(
                "softmax axis {} out of range for shape {:?}",
                axis, shape
            )));
        }
        let (outer, len, inner) = k::axis_split(&shape, axis);
        let mut out = vec![0.0; self.datas[x.0].len()];
        k::softmax_forward(&self.datas[x.0], outer, len, inner, &mut out);
        let needs = self.needs(x);
        self.push(shape, out, Op::Softmax { x, axis }, needs)
    }

    pub fn layer_norm(&mut self, x: Val, axis: usize, eps: f64) -> Result<Val> {
        let shape = self.shapes[x.0].clone();
        if axis >= shape.len() {
            return Err(Error::shape(format!(
                "layer_norm axis {} out of range for shape {:?}",
                axis, shape
            )));
        }
        let (outer, len, inner) = k::axis_split(&shape, axis);
        let mut out = vec![0.0; self.datas[x.0].len()];
        k::layer_norm_forward(&self.datas[x.0], outer, len, inner, eps, &mut out);
        let needs = self.needs(x);
        self.push(shape, out, Op::LayerNorm { x, axis, eps }, needs)
    }

    // -- sampling / scatter -------------------------------------------------

    /// Bilinear gather: samples `src` [c,h,w] at continuous (y,x) positions.
    ///
    /// `coords` is [entries, 2, positions] (row coordinate then column
    /// coordinate); `weights`, when present, is [entries, positions] and the
    /// entry samples are blended per position. Output is [c, positions].
    /// Gradients flow to `src`, `coords`, and `weights`.
    pub fn gather_bilinear(
        &mut self,
        src: Val,
        coords: Val,
        weights: Option<Val>,
        border: Border,
    ) -> Result<Val> {
        let ss = self.shape(src);
        let sc = self.shape(coords);
        if ss.len() != 3 || sc.len() != 3 || sc[1] != 2 {
            return Err(Error::shape(format!(
                "gather_bilinear expects src [c,h,w], coords [e,2,p]; got {:?}, {:?}",
                ss, sc
            )));
        }
        let (c, h, w) = (ss[0], ss[1], ss[2]);
        let (e, p) = (sc[0], sc[2]);
        if let Some(wv) = weights {
            let swt = self.shape(wv);
            if swt != [e, p] {
                return Err(Error::shape(format!(
                    "gather_bilinear weights shape {:?}, expected [{}, {}]",
                    swt, e, p
                )));
            }
        }
        let mut out = vec![0.0; c * p];
        {
            let src_d = &self.datas[src.0];
            let coords_d = &self.datas[coords.0];
            let weights_d = weights.map(|wv| self.datas[wv.0].as_slice());
            for ei in 0..e {
                for pi in 0..p {
                    let y = coords_d[(ei * 2) * p + pi];
                    let x = coords_d[(ei * 2 + 1) * p + pi];
                    let blend = weights_d.map_or(1.0, |wd| wd[ei * p + pi]);
                    if blend == 0.0 {
                        continue;
                    }
                    let (taps, count) = k::bilinear_taps(y, x, h, w, border);
                    for t in &taps[..count] {
                        if t.weight == 0.0 {
                            continue;
                        }
                        let base = t.row * w + t.col;
                        for ci in 0..c {
                            out[ci * p + pi] += blend * t.weight * src_d[ci * h * w + base];
                        }
                    }
                }
            }
        }
        let needs = self.needs(src)
            || self.needs(coords)
            || weights.map(|wv| self.needs(wv)).unwrap_or(false);
        self.push(
            vec![c, p],
            out,
            Op::GatherBilinear { src, coords, weights, h, w, border },
            needs,
        )
    }

    /// Row scatter-add: `src` is [points, m]; row `i` is added into output
    /// row `index[i]`; `None` rows are dropped. Output is [rows, m].
    /// Contributions accumulate in ascending point order.
    pub fn scatter_add(
        &mut self,
        src: Val,
        index: Rc<Vec<Option<usize>>>,
        rows: usize,
    ) -> Result<Val> {
        let ss = self.shape(src);
        if ss.len() != 2 || ss[0] != index.len() {
            return Err(Error::shape(format!(
                "scatter_add expects src [points,m] with {} index entries; got {:?}",
                index.len(),
                ss
            )));
        }
        let m = ss[1];
        if let Some(bad) = index.iter().flatten().find(|&&r| r >= rows) {
            return Err(Error::shape(format!(
                "scatter_add row index {} out of range ({} rows)",
                bad, rows
            )));
        }
        let mut out = vec![0.0; rows * m];
        {
            let src_d = &self.datas[src.0];
            for (pt, row) in index.iter().enumerate() {
                if let Some(r) = row {
                    for j in 0..m {
                        out[r * m + j] += src_d[pt * m + j];
                    }
                }
            }
        }
        let needs = self.needs(src);
        self.push(vec![rows, m], out, Op::ScatterAdd { src, index }, needs)
    }

    // -- shape plumbing ------------------------------------------------------

    pub fn reshape(&mut self, x: Val, shape: Vec<usize>) -> Result<Val> {
        if k::numel(&shape) != self.datas[x.0].len() {
            return Err(Error::shape(format!(
                "reshape {:?} -> {:?} changes element count",
                self.shapes[x.0], shape
            )));
        }
        let data = self.datas[x.0].clone();
        let needs = self.needs(x);
        self.push(shape, data, Op::Reshape { x }, needs)
    }

    pub fn permute(&mut self, x: Val, axes: &[usize]) -> Result<Val> {
        let shape = self.shapes[x.0].clone();
        let rank = shape.len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::shape(format!(
                "permute axes {:?} invalid for shape {:?}",
                axes, shape
            )));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let data = permute_copy(&self.datas[x.0], &shape, axes);
        let needs = self.needs(x);
        self.push(out_shape, data, Op::Permute { x, axes: axes.to_vec() }, needs)
    }

    /// Contiguous slice `start..start+len` along axis 0.
    pub fn slice_axis0(&mut self, x: Val, start: usize, len: usize) -> Result<Val> {
        let shape = self.shapes[x.0].clone();
        if shape.is_empty() || start + len > shape[0] {
            return Err(Error::shape(format!(
                "slice [{}..{}] out of range for shape {:?}",
                start,
                start + len,
                shape
            )));
        }
        let row: usize = shape[1..].iter().product();
        let data = self.datas[x.0][start * row..(start + len) * row].to_vec();
        let mut out_shape = shape;
        out_shape[0] = len;
        let needs = self.needs(x);
        self.push(out_shape, data, Op::SliceAxis0 { x, start }, needs)
    }

    pub fn concat_axis0(&mut self, xs: &[Val]) -> Result<Val> {
        if xs.is_empty() {
            return Err(Error::shape("concat of zero tensors".to_string()));
        }
        let rest = self.shapes[xs[0].0][1..].to_vec();
        let mut d0 = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.is_empty() || s[1..] != rest[..] {
                return Err(Error::shape(format!(
                    "concat_axis0 trailing dims differ: {:?} vs {:?}",
                    s, rest
                )));
            }
            d0 += s[0];
        }
        let mut data = Vec::with_capacity(d0 * rest.iter().product::<usize>());
        for &v in xs {
            data.extend_from_slice(&self.datas[v.0]);
        }
        let mut shape = vec![d0];
        shape.extend_from_slice(&rest);
        let needs = xs.iter().any(|&v| self.needs(v));
        self.push(shape, data, Op::ConcatAxis0 { xs: xs.to_vec() }, needs)
    }

    /// Nearest-neighbor upsampling of [c,h,w] by an integer factor.
    pub fn upsample_nearest(&mut self, x: Val, factor: usize) -> Result<Val> {
        let s = self.shape(x);
        if s.len() != 3 || factor == 0 {
            return Err(Error::shape(format!(
                "upsample_nearest expects [c,h,w] and factor >= 1; got {:?}, {}",
                s, factor
            )));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (ho, wo) = (h * factor, w * factor);
        let mut out = vec![0.0; c * ho * wo];
        {
            let xd = &self.datas[x.0];
            for ci in 0..c {
                for i in 0..ho {
                    for j in 0..wo {
                        out[(ci * ho + i) * wo + j] = xd[(ci * h + i / factor) * w + j / factor];
                    }
                }
            }
        }
        let needs = self.needs(x);
        self.push(vec![c, ho, wo], out, Op::UpsampleNearest { x, factor }, needs)
    }

    // -- reductions / losses -------------------------------------------------

    /// Sum of all elements, as a rank-0 scalar.
    pub fn sum_all(&mut self, x: Val) -> Result<Val> {
        let s: f64 = self.datas[x.0].iter().sum();
        let needs = self.needs(x);
        self.push(vec![], vec![s], Op::ReduceSum { x }, needs)
    }

    /// Mean softmax cross entropy over positions: `logits` is
    /// [classes, positions]; masked-out positions are excluded.
    pub fn cross_entropy(
        &mut self,
        logits: Val,
        targets: Rc<Vec<usize>>,
        mask: Option<Rc<Vec<bool>>>,
    ) -> Result<Val> {
        let s = self.shape(logits);
        if s.len() != 2 || s[1] != targets.len() {
            return Err(Error::shape(format!(
                "cross_entropy expects logits [classes, positions={}]; got {:?}",
                targets.len(),
                s
            )));
        }
        if let Some(m) = &mask {
            if m.len() != targets.len() {
                return Err(Error::shape(format!(
                    "cross_entropy mask length {} != positions {}",
                    m.len(),
                    targets.len()
                )));
            }
        }
        let loss = k::cross_entropy_forward(
            &self.datas[logits.0],
            s[0],
            s[1],
            &targets,
            mask.as_deref().map(|m| m.as_slice()),
        )?;
        let needs = self.needs(logits);
        self.push(vec![], vec![loss], Op::CrossEntropy { logits, targets, mask }, needs)
    }

    /// The selective-scan recurrence as one primitive with a hand-written
    /// adjoint: h_t = a_bar_t * h_{t-1} + bx_t, y_t[d] = sum_n c_t[n] h_t[d,n].
    pub fn ssm_scan(&mut self, a_bar: Val, bx: Val, c: Val, h0: &[f64]) -> Result<Val> {
        let sa = self.shape(a_bar).to_vec();
        let sb = self.shape(bx);
        let sc = self.shape(c);
        if sa.len() != 3 || sb != sa || sc.len() != 2 || sc[0] != sa[0] || sc[1] != sa[2] {
            return Err(Error::shape(format!(
                "ssm_scan expects a_bar/bx [l,d,n] and c [l,n]; got {:?}, {:?}, {:?}",
                sa, sb, sc
            )));
        }
        let (l, d, n) = (sa[0], sa[1], sa[2]);
        if h0.len() != d * n {
            return Err(Error::shape(format!(
                "ssm_scan h0 length {} != d*n = {}",
                h0.len(),
                d * n
            )));
        }
        let mut y = vec![0.0; l * d];
        let mut h_traj = Vec::with_capacity(l * d * n);
        k::scan_sequential(
            &self.datas[a_bar.0],
            &self.datas[bx.0],
            &self.datas[c.0],
            h0,
            l,
            d,
            n,
            &mut y,
            Some(&mut h_traj),
        );
        let needs = self.needs(a_bar) || self.needs(bx) || self.needs(c);
        self.push(
            vec![l, d],
            y,
            Op::SsmScan {
                a_bar,
                bx,
                c,
                h0: Rc::new(h0.to_vec()),
                h_traj: Rc::new(h_traj),
                l,
                d,
                n,
            },
            needs,
        )
    }

    // -- backward ------------------------------------------------------------

    /// Reverse pass from a scalar loss. Gradients of every `requires_grad`
    /// leaf are accumulated into the leased tensors.
    pub fn backward(&mut self, loss: Val) -> Result<()> {
        if self.datas[loss.0].len() != 1 {
            return Err(Error::shape(format!(
                "backward expects a scalar loss, got shape {:?}",
                self.shapes[loss.0]
            )));
        }
        if !self.needs[loss.0] {
            return Ok(()); // nothing requested gradients
        }
        self.grads[loss.0][0] = 1.0;

        let Tape { shapes, datas, grads, needs, ops, .. } = self;
        for i in (0..ops.len()).rev() {
            if !needs[i] {
                continue;
            }
            let (head, tail) = grads.split_at_mut(i);
            let gout = &tail[0];
            match &ops[i] {
                Op::Leaf { .. } => {}
                Op::Add { a, b } => {
                    k::for_each_broadcast(&shapes[i], &shapes[a.0], &shapes[b.0], |o, ia, ib| {
                        if needs[a.0] {
                            head[a.0][ia] += gout[o];
                        }
                        if needs[b.0] {
                            head[b.0][ib] += gout[o];
                        }
                    });
                }
                Op::Mul { a, b } => {
                    let (da, db) = (&datas[a.0], &datas[b.0]);
                    k::for_each_broadcast(&shapes[i], &shapes[a.0], &shapes[b.0], |o, ia, ib| {
                        if needs[a.0] {
                            head[a.0][ia] += gout[o] * db[ib];
                        }
                        if needs[b.0] {
                            head[b.0][ib] += gout[o] * da[ia];
                        }
                    });
                }
                Op::Scale { x, factor } => {
                    if needs[x.0] {
                        for (g, go) in head[x.0].iter_mut().zip(gout) {
                            *g += go * factor;
                        }
                    }
                }
                Op::Matmul { a, b, m, k: kk, n } => {
                    let (da, db) = (&datas[a.0], &datas[b.0]);
                    if needs[a.0] {
                        let ga = &mut head[a.0];
                        for mi in 0..*m {
                            for ki in 0..*kk {
                                let mut acc = 0.0;
                                for ni in 0..*n {
                                    acc += gout[mi * n + ni] * db[ki * n + ni];
                                }
                                ga[mi * kk + ki] += acc;
                            }
                        }
                    }
                    if needs[b.0] {
                        let gb = &mut head[b.0];
                        for ki in 0..*kk {
                            for ni in 0..*n {
                                let mut acc = 0.0;
                                for mi in 0..*m {
                                    acc += da[mi * kk + ki] * gout[mi * n + ni];
                                }
                                gb[ki * n + ni] += acc;
                            }
                        }
                    }
                }
                Op::Conv2d { x, w, bias, spec } => {
                    // conv backward always fills both input grads; cheap at
                    // these sizes and keeps the kernel single-purpose
                    let mut gx = vec![0.0; datas[x.0].len()];
                    let mut gw = vec![0.0; datas[w.0].len()];
                    let mut gb = bias.map(|b| vec![0.0; datas[b.0].len()]);
                    k::conv2d_backward(
                        &datas[x.0],
                        &datas[w.0],
                        spec,
                        gout,
                        &mut gx,
                        &mut gw,
                        gb.as_deref_mut(),
                    );
                    if needs[x.0] {
                        for (g, d) in head[x.0].iter_mut().zip(&gx) {
                            *g += d;
                        }
                    }
                    if needs[w.0] {
                        for (g, d) in head[w.0].iter_mut().zip(&gw) {
                            *g += d;
                        }
                    }
                    if let (Some(b), Some(gb)) = (bias, gb) {
                        if needs[b.0] {
                            for (g, d) in head[b.0].iter_mut().zip(&gb) {
                                *g += d;
                            }
                        }
                    }
                }
                Op::Exp { x } => {
                    if needs[x.0] {
                        let y = &datas[i];
                        for j in 0..y.len() {
                            head[x.0][j] += gout[j] * y[j];
                        }
                    }
                }
                Op::Softplus { x } => {
                    if needs[x.0] {
                        let xd = &datas[x.0];
                        for j in 0..xd.len() {
                            head[x.0][j] += gout[j] * k::sigmoid(xd[j]);
                        }
                    }
                }
                Op::ZohPhi { x } => {
                    if needs[x.0] {
                        let xd = &datas[x.0];
                        for j in 0..xd.len() {
                            head[x.0][j] += gout[j] * k::zoh_phi_deriv(xd[j]);
                        }
                    }
                }
                Op::Softmax { x, axis } => {
                    if needs[x.0] {
                        let (outer, len, inner) = k::axis_split(&shapes[i], *axis);
                        k::softmax_backward(&datas[i], gout, outer, len, inner, &mut head[x.0]);
                    }
                }
                Op::LayerNorm { x, axis, eps } => {
                    if needs[x.0] {
                        let (outer, len, inner) = k::axis_split(&shapes[i], *axis);
                        k::layer_norm_backward(
                            &datas[x.0],
                            gout,
                            outer,
                            len,
                            inner,
                            *eps,
                            &mut head[x.0],
                        );
                    }
                }
                Op::GatherBilinear { src, coords, weights, h, w, border } => {
                    let (c, p) = (shapes[i][0], shapes[i][1]);
                    let e = shapes[coords.0][0];
                    let src_d = &datas[src.0];
                    let coords_d = &datas[coords.0];
                    let weights_d = weights.map(|wv| datas[wv.0].clone());
                    let need_src = needs[src.0];
                    let need_coords = needs[coords.0];
                    let need_weights = weights.map(|wv| needs[wv.0]).unwrap_or(false);
                    for ei in 0..e {
                        for pi in 0..p {
                            let y = coords_d[(ei * 2) * p + pi];
                            let x = coords_d[(ei * 2 + 1) * p + pi];
                            let blend = weights_d.as_ref().map_or(1.0, |wd| wd[ei * p + pi]);
                            let (taps, count) = k::bilinear_taps(y, x, *h, *w, *border);
                            let mut dval_dy = vec![0.0; c];
                            let mut dval_dx = vec![0.0; c];
                            let mut val = vec![0.0; c];
                            for t in &taps[..count] {
                                let base = t.row * w + t.col;
                                for ci in 0..c {
                                    let s = src_d[ci * h * w + base];
                                    val[ci] += t.weight * s;
                                    dval_dy[ci] += t.dw_dy * s;
                                    dval_dx[ci] += t.dw_dx * s;
                                }
                                if need_src && blend != 0.0 {
                                    for ci in 0..c {
                                        head[src.0][ci * h * w + base] +=
                                            gout[ci * p + pi] * blend * t.weight;
                                    }
                                }
                            }
                            if need_coords {
                                let mut gy = 0.0;
                                let mut gx = 0.0;
                                for ci in 0..c {
                                    gy += gout[ci * p + pi] * blend * dval_dy[ci];
                                    gx += gout[ci * p + pi] * blend * dval_dx[ci];
                                }
                                head[coords.0][(ei * 2) * p + pi] += gy;
                                head[coords.0][(ei * 2 + 1) * p + pi] += gx;
                            }
                            if need_weights {
                                let gw_val: f64 =
                                    (0..c).map(|ci| gout[ci * p + pi] * val[ci]).sum();
                                if let Some(wv) = weights {
                                    head[wv.0][ei * p + pi] += gw_val;
                                }
                            }
                        }
                    }
                }
                Op::ScatterAdd { src, index } => {
                    if needs[src.0] {
                        let m = shapes[i][1];
                        for (pt, row) in index.iter().enumerate() {
                            if let Some(r) = row {
                                for j in 0..m {
                                    head[src.0][pt * m + j] += gout[r * m + j];
                                }
                            }
                        }
                    }
                }
                Op::Reshape { x } => {
                    if needs[x.0] {
                        for (g, go) in head[x.0].iter_mut().zip(gout) {
                            *g += go;
                        }
                    }
                }
                Op::Permute { x, axes } => {
                    if needs[x.0] {
                        // scatter output grads back through the permutation
                        let in_shape = &shapes[x.0];
                        let moved = permute_copy_grad(gout, in_shape, axes);
                        for (g, go) in head[x.0].iter_mut().zip(&moved) {
                            *g += go;
                        }
                    }
                }
                Op::SliceAxis0 { x, start } => {
                    if needs[x.0] {
                        let row: usize = shapes[i][1..].iter().product();
                        let off = start * row;
                        for (j, go) in gout.iter().enumerate() {
                            head[x.0][off + j] += go;
                        }
                    }
                }
                Op::ConcatAxis0 { xs } => {
                    let mut off = 0;
                    for &v in xs {
                        let len = datas[v.0].len();
                        if needs[v.0] {
                            for j in 0..len {
                                head[v.0][j] += gout[off + j];
                            }
                        }
                        off += len;
                    }
                }
                Op::UpsampleNearest { x, factor } => {
                    if needs[x.0] {
                        let s = &shapes[x.0];
                        let (c, h, w) = (s[0], s[1], s[2]);
                        let (ho, wo) = (h * factor, w * factor);
                        for ci in 0..c {
                            for ii in 0..ho {
                                for jj in 0..wo {
                                    head[x.0][(ci * h + ii / factor) * w + jj / factor] +=
                                        gout[(ci * ho + ii) * wo + jj];
                                }
                            }
                        }
                    }
                }
                Op::ReduceSum { x } => {
                    if needs[x.0] {
                        let g = gout[0];
                        for v in head[x.0].iter_mut() {
                            *v += g;
                        }
                    }
                }
                Op::CrossEntropy { logits, targets, mask } => {
                    if needs[logits.0] {
                        let s = &shapes[logits.0];
                        k::cross_entropy_backward(
                            &datas[logits.0],
                            s[0],
                            s[1],
                            targets,
                            mask.as_deref().map(|m| m.as_slice()),
                            gout[0],
                            &mut head[logits.0],
                        );
                    }
                }
                Op::SsmScan { a_bar, bx, c, h0, h_traj, l, d, n } => {
                    let mut ga = vec![0.0; datas[a_bar.0].len()];
                    let mut gbx = vec![0.0; datas[bx.0].len()];
                    let mut gc = vec![0.0; datas[c.0].len()];
                    k::scan_adjoint(
                        &datas[a_bar.0],
                        &datas[c.0],
                        h0,
                        h_traj,
                        gout,
                        *l,
                        *d,
                        *n,
                        &mut ga,
                        &mut gbx,
                        &mut gc,
                    );
                    if needs[a_bar.0] {
                        for (g, v) in head[a_bar.0].iter_mut().zip(&ga) {
                            *g += v;
                        }
                    }
                    if needs[bx.0] {
                        for (g, v) in head[bx.0].iter_mut().zip(&gbx) {
                            *g += v;
                        }
                    }
                    if needs[c.0] {
                        for (g, v) in head[c.0].iter_mut().zip(&gc) {
                            *g += v;
                        }
                    }
                }
            }
        }

        // write leaf gradients back to their shared tensors
        for i in 0..self.ops.len() {
            if !self.needs[i] {
                continue;
            }
            if let Op::Leaf { source: Some(p) } = &self.ops[i] {
                let mut t = p.borrow_mut();
                if t.requires_grad {
                    t.accumulate_grad(&self.grads[i]);
                }
            }
        }
        Ok(())
    }
}

fn permute_copy(data: &[f64], shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    if rank == 0 {
        return data.to_vec();
    }
    let in_strides = k::strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let mut out = vec![0.0; data.len()];
    let mut idx = vec![0usize; rank];
    for item in out.iter_mut() {
        let mut src = 0;
        for d in 0..rank {
            src += idx[d] * in_strides[axes[d]];
        }
        *item = data[src];
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

/// Moves output-layout grads back into input layout (inverse permutation).
fn permute_copy_grad(gout: &[f64], in_shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let rank = in_shape.len();
    if rank == 0 {
        return gout.to_vec();
    }
    let in_strides = k::strides(in_shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let mut gin = vec![0.0; gout.len()];
    let mut idx = vec![0usize; rank];
    for &g in gout {
        let mut src = 0;
        for d in 0..rank {
            src += idx[d] * in_strides[axes[d]];
        }
        gin[src] = g;
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    gin
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(shape: Vec<usize>, data: Vec<f64>) -> Param {
        Param::new(Tensor::new(shape, data).unwrap())
    }

    #[test]
    fn add_elementwise() {
        let mut tape = Tape::new();
        let a = tape.literal(vec![2], vec![1.0, 2.0]).unwrap();
        let b = tape.literal(vec![2], vec![3.0, 4.0]).unwrap();
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.data(c), &[4.0, 6.0]);
    }

    #[test]
    fn softplus_of_zero() {
        let mut tape = Tape::new();
        let x = tape.literal(vec![1], vec![0.0]).unwrap();
        let y = tape.softplus(x).unwrap();
        assert!((tape.data(y)[0] - 0.6931471805599453).abs() < 1e-12);
    }

    #[test]
    fn conv2d_all_ones_center() {
        // 3x3 ones kernel, pad 1, on a 3x3 ones map: center output is 9
        let mut tape = Tape::new();
        let x = tape.literal(vec![1, 3, 3], vec![1.0; 9]).unwrap();
        let w = tape.literal(vec![1, 1, 3, 3], vec![1.0; 9]).unwrap();
        let y = tape.conv2d(x, w, None, 1, 1).unwrap();
        assert_eq!(tape.shape(y), &[1, 3, 3]);
        assert_eq!(tape.data(y)[4], 9.0);
        assert_eq!(tape.data(y)[0], 4.0); // corner
    }

    #[test]
    fn backward_square_sum() {
        // loss = sum(x*x), x=[1,2] -> grad [2,4]
        let p = param(vec![2], vec![1.0, 2.0]);
        let mut tape = Tape::new();
        let x = tape.value(&p);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(p.borrow().grad.as_deref(), Some(&[2.0, 4.0][..]));
    }

    #[test]
    fn backward_exp_at_zero() {
        let p = param(vec![1], vec![0.0]);
        let mut tape = Tape::new();
        let x = tape.value(&p);
        let e = tape.exp(x).unwrap();
        let loss = tape.sum_all(e).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(p.borrow().grad.as_deref(), Some(&[1.0][..]));
    }

    #[test]
    fn cross_entropy_uniform_gradient() {
        // uniform logits over 4 classes, target 0: grad = softmax - onehot
        let p = param(vec![4, 1], vec![0.0; 4]);
        let mut tape = Tape::new();
        let logits = tape.value(&p);
        let loss = tape.cross_entropy(logits, Rc::new(vec![0]), None).unwrap();
        tape.backward(loss).unwrap();
        let g = p.borrow().grad.clone().unwrap();
        let expect = [-0.75, 0.25, 0.25, 0.25];
        for (a, b) in g.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let p = param(vec![2], vec![1.0, 2.0]);
        let mut tape = Tape::new();
        let x = tape.value(&p);
        assert!(matches!(tape.backward(x), Err(Error::Shape(_))));
    }

    #[test]
    fn strict_mode_flags_non_finite() {
        let mut tape = Tape::strict();
        let x = tape.literal(vec![1], vec![1e308]).unwrap();
        let d = tape.add(x, x).unwrap(); // still finite
        assert!(tape.exp(d).is_err()); // overflows to inf
    }

    #[test]
    fn reshape_permute_round_trip_bit_exact() {
        let data: Vec<f64> = (0..24).map(|i| i as f64 * 0.37 + 0.1).collect();
        let mut tape = Tape::new();
        let x = tape.literal(vec![2, 3, 4], data.clone()).unwrap();
        let p = tape.permute(x, &[2, 0, 1]).unwrap();
        let back = tape.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(tape.data(back), &data[..]);
        let r = tape.reshape(x, vec![4, 6]).unwrap();
        let rback = tape.reshape(r, vec![2, 3, 4]).unwrap();
        assert_eq!(tape.data(rback), &data[..]);
    }

    #[test]
    fn scatter_add_sums_per_row() {
        let mut tape = Tape::new();
        let src = tape
            .literal(vec![3, 2], vec![3.0, 1.0, 4.0, 1.0, 5.0, 9.0])
            .unwrap();
        let idx = Rc::new(vec![Some(1), Some(1), None]);
        let out = tape.scatter_add(src, idx, 2).unwrap();
        assert_eq!(tape.data(out), &[0.0, 0.0, 7.0, 2.0]);
    }

    #[test]
    fn gather_bilinear_interpolates_and_clamps() {
        let mut tape = Tape::new();
        let src = tape
            .literal(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0])
            .unwrap();
        // sample at (0, 0.5) -> 1.5; at (0, 3.0) clamped -> 2.0
        let coords = tape
            .literal(vec![1, 2, 2], vec![0.0, 0.0, 0.5, 3.0])
            .unwrap();
        let out = tape.gather_bilinear(src, coords, None, Border::Clamp).unwrap();
        assert_eq!(tape.data(out), &[1.5, 2.0]);
    }

    #[test]
    fn leased_param_receives_grad_once_per_backward() {
        let p = param(vec![2], vec![1.0, 3.0]);
        let mut tape = Tape::new();
        let x = tape.value(&p);
        let y = tape.value(&p); // leased twice: total derivative sums
        let s = tape.add(x, y).unwrap();
        let loss = tape.sum_all(s).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(p.borrow().grad.as_deref(), Some(&[2.0, 2.0][..]));
    }
}
