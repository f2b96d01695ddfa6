//! Differentiable operations and their reverse rules.

use super::{check_finite, Node, NodeRec, Tape, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddRow { mat: usize, row: usize },
    MatMul { a: usize, b: usize },
    Reshape(usize),
    Row { src: usize, index: usize },
    Concat { parts: Vec<usize> },
    SumAll(usize),
    MeanAll(usize),
    MeanAxis { src: usize, axis: usize },
    Relu(usize),
    Exp(usize),
    Square(usize),
    Sqrt(usize),
    L2Norm(usize),
    GatherRows { src: usize, indices: Vec<usize> },
    SpaceToDepth { src: usize, block: usize },
    DepthToSpace { src: usize, block: usize },
}

fn mismatch(op: &'static str, details: String) -> Error {
    Error::ShapeMismatch { op, details }
}

/// Resolves the common tape of a set of operands, if any is attached.
fn common_tape(operands: &[&Tensor]) -> Result<Option<Tape>> {
    let mut tape: Option<Tape> = None;
    for t in operands {
        if let Some(node) = t.node() {
            match &tape {
                None => tape = Some(node.tape.clone()),
                Some(existing) => {
                    if !existing.same_tape(&node.tape) {
                        return Err(Error::GraphMismatch);
                    }
                }
            }
        }
    }
    if let Some(t) = &tape {
        if t.is_consumed() {
            return Err(Error::GraphConsumed);
        }
    }
    Ok(tape)
}

/// Node id of `t` on `tape`, recording a constant leaf if detached.
fn lift(tape: &Tape, t: &Tensor) -> usize {
    match t.node() {
        Some(node) => node.id,
        None => tape.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, None),
    }
}

fn record(
    op_name: &'static str,
    operands: &[&Tensor],
    shape: Vec<usize>,
    data: Vec<f64>,
    make_op: impl FnOnce(&[usize]) -> Op,
) -> Result<Tensor> {
    check_finite(op_name, &data)?;
    match common_tape(operands)? {
        None => Ok(Tensor::with_node(shape, data, None)),
        Some(tape) => {
            let ids: Vec<usize> = operands.iter().map(|t| lift(&tape, t)).collect();
            let id = tape.push(shape.clone(), data.clone(), make_op(&ids), None);
            Ok(Tensor::with_node(shape, data, Some(Node { tape, id })))
        }
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(mismatch(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ))
    }
}

impl Tensor {
    /// Elementwise sum; shapes must match exactly.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("add", self, other)?;
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| a + b)
            .collect();
        record("add", &[self, other], self.shape().to_vec(), data, |ids| {
            Op::Add(ids[0], ids[1])
        })
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("sub", self, other)?;
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| a - b)
            .collect();
        record("sub", &[self, other], self.shape().to_vec(), data, |ids| {
            Op::Sub(ids[0], ids[1])
        })
    }

    /// Elementwise product; shapes must match exactly.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("mul", self, other)?;
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| a * b)
            .collect();
        record("mul", &[self, other], self.shape().to_vec(), data, |ids| {
            Op::Mul(ids[0], ids[1])
        })
    }

    pub fn scale(&self, c: f64) -> Result<Tensor> {
        let data = self.data().iter().map(|a| a * c).collect();
        record("scale", &[self], self.shape().to_vec(), data, |ids| {
            Op::Scale(ids[0], c)
        })
    }

    /// Adds a length-`m` row vector to every row of an `[n, m]` matrix.
    pub fn add_row(&self, row: &Tensor) -> Result<Tensor> {
        if self.shape().len() != 2 || row.shape().len() != 1 || self.shape()[1] != row.shape()[0] {
            return Err(mismatch(
                "add_row",
                format!("{:?} + {:?}", self.shape(), row.shape()),
            ));
        }
        let m = row.shape()[0];
        let data = self
            .data()
            .iter()
            .enumerate()
            .map(|(i, a)| a + row.data()[i % m])
            .collect();
        record(
            "add_row",
            &[self, row],
            self.shape().to_vec(),
            data,
            |ids| Op::AddRow {
                mat: ids[0],
                row: ids[1],
            },
        )
    }

    /// 2-D matrix product `[n, k] x [k, m] -> [n, m]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape().len() != 2 || other.shape().len() != 2 || self.shape()[1] != other.shape()[0]
        {
            return Err(mismatch(
                "matmul",
                format!("{:?} x {:?}", self.shape(), other.shape()),
            ));
        }
        let (n, k) = (self.shape()[0], self.shape()[1]);
        let m = other.shape()[1];
        let data = matmul_raw(self.data(), other.data(), n, k, m);
        record("matmul", &[self, other], vec![n, m], data, |ids| {
            Op::MatMul {
                a: ids[0],
                b: ids[1],
            }
        })
    }

    /// Reinterprets the data under a new shape with the same element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(mismatch(
                "reshape",
                format!("{:?} -> {:?}", self.shape(), shape),
            ));
        }
        record(
            "reshape",
            &[self],
            shape.to_vec(),
            self.data().to_vec(),
            |ids| Op::Reshape(ids[0]),
        )
    }

    /// Slice along the first axis: `[d0, rest..] -> [rest..]`.
    pub fn row(&self, index: usize) -> Result<Tensor> {
        if self.shape().is_empty() || index >= self.shape()[0] {
            return Err(mismatch(
                "row",
                format!("index {} into shape {:?}", index, self.shape()),
            ));
        }
        let inner: usize = self.shape()[1..].iter().product();
        let data = self.data()[index * inner..(index + 1) * inner].to_vec();
        record("row", &[self], self.shape()[1..].to_vec(), data, |ids| {
            Op::Row {
                src: ids[0],
                index,
            }
        })
    }

    /// Concatenation along the first axis. Scalars are treated as `[1]`;
    /// all parts must agree on trailing extents.
    pub fn concat(parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::Empty { what: "concat parts" });
        }
        let tail = |t: &Tensor| -> Vec<usize> {
            if t.shape().is_empty() {
                vec![]
            } else {
                t.shape()[1..].to_vec()
            }
        };
        let head = |t: &Tensor| -> usize {
            if t.shape().is_empty() {
                1
            } else {
                t.shape()[0]
            }
        };
        let tail0 = tail(&parts[0]);
        let mut total = 0usize;
        for p in parts {
            if tail(p) != tail0 {
                return Err(mismatch(
                    "concat",
                    format!("{:?} vs {:?}", p.shape(), parts[0].shape()),
                ));
            }
            total += head(p);
        }
        let mut shape = vec![total];
        shape.extend_from_slice(&tail0);
        let mut data = Vec::with_capacity(shape.iter().product());
        for p in parts {
            data.extend_from_slice(p.data());
        }
        let refs: Vec<&Tensor> = parts.iter().collect();
        record("concat", &refs, shape, data, |ids| Op::Concat {
            parts: ids.to_vec(),
        })
    }

    pub fn sum_all(&self) -> Result<Tensor> {
        let s: f64 = self.data().iter().sum();
        record("sum", &[self], vec![], vec![s], |ids| Op::SumAll(ids[0]))
    }

    pub fn mean_all(&self) -> Result<Tensor> {
        if self.numel() == 0 {
            return Err(Error::Empty { what: "mean input" });
        }
        let s: f64 = self.data().iter().sum();
        let m = s / self.numel() as f64;
        record("mean", &[self], vec![], vec![m], |ids| Op::MeanAll(ids[0]))
    }

    /// Mean along one axis; the axis disappears from the shape.
    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.shape().len() || self.shape()[axis] == 0 {
            return Err(mismatch(
                "mean_axis",
                format!("axis {} of {:?}", axis, self.shape()),
            ));
        }
        let (outer, ext, inner) = axis_strides(self.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for e in 0..ext {
                let base = (o * ext + e) * inner;
                for i in 0..inner {
                    out[o * inner + i] += self.data()[base + i];
                }
            }
        }
        for v in &mut out {
            *v /= ext as f64;
        }
        let mut shape = self.shape().to_vec();
        shape.remove(axis);
        record("mean_axis", &[self], shape, out, |ids| Op::MeanAxis {
            src: ids[0],
            axis,
        })
    }

    pub fn relu(&self) -> Result<Tensor> {
        let data = self.data().iter().map(|&v| v.max(0.0)).collect();
        record("relu", &[self], self.shape().to_vec(), data, |ids| {
            Op::Relu(ids[0])
        })
    }

    pub fn exp(&self) -> Result<Tensor> {
        let data = self.data().iter().map(|v| v.exp()).collect();
        record("exp", &[self], self.shape().to_vec(), data, |ids| {
            Op::Exp(ids[0])
        })
    }

    pub fn square(&self) -> Result<Tensor> {
        let data = self.data().iter().map(|v| v * v).collect();
        record("square", &[self], self.shape().to_vec(), data, |ids| {
            Op::Square(ids[0])
        })
    }

    pub fn sqrt(&self) -> Result<Tensor> {
        let data = self.data().iter().map(|v| v.sqrt()).collect();
        record("sqrt", &[self], self.shape().to_vec(), data, |ids| {
            Op::Sqrt(ids[0])
        })
    }

    /// Euclidean norm over all elements, as a scalar.
    ///
    /// The subgradient at the origin is taken to be zero, matching the
    /// relu convention at its kink.
    pub fn l2_norm(&self) -> Result<Tensor> {
        let s: f64 = self.data().iter().map(|v| v * v).sum();
        record("l2_norm", &[self], vec![], vec![s.sqrt()], |ids| {
            Op::L2Norm(ids[0])
        })
    }

    /// Rearranges `[h, w, c]` into `[h/b, w/b, b*b*c]` by folding each
    /// `b x b` spatial block into the channel axis.
    pub fn space_to_depth(&self, block: usize) -> Result<Tensor> {
        let [h, w, c] = rank3("space_to_depth", self.shape())?;
        if block == 0 || h % block != 0 || w % block != 0 {
            return Err(mismatch(
                "space_to_depth",
                format!("block {} does not divide {:?}", block, self.shape()),
            ));
        }
        let shape = vec![h / block, w / block, block * block * c];
        let mut data = vec![0.0; self.numel()];
        for (out_idx, src_idx) in s2d_map(h, w, c, block) {
            data[out_idx] = self.data()[src_idx];
        }
        record("space_to_depth", &[self], shape, data, |ids| {
            Op::SpaceToDepth {
                src: ids[0],
                block,
            }
        })
    }

    /// Inverse of [`Tensor::space_to_depth`]: `[h, w, b*b*c] -> [h*b, w*b, c]`.
    pub fn depth_to_space(&self, block: usize) -> Result<Tensor> {
        let [h, w, cc] = rank3("depth_to_space", self.shape())?;
        if block == 0 || cc % (block * block) != 0 {
            return Err(mismatch(
                "depth_to_space",
                format!("block {} does not divide channels of {:?}", block, self.shape()),
            ));
        }
        let c = cc / (block * block);
        let shape = vec![h * block, w * block, c];
        let mut data = vec![0.0; self.numel()];
        for (folded_idx, spatial_idx) in s2d_map(h * block, w * block, c, block) {
            data[spatial_idx] = self.data()[folded_idx];
        }
        record("depth_to_space", &[self], shape, data, |ids| {
            Op::DepthToSpace {
                src: ids[0],
                block,
            }
        })
    }
}

/// Gathers rows of a `[k, d]` matrix: output row `i` is `src[indices[i]]`.
/// Differentiable with respect to `src` (scatter-add on the way back).
pub fn gather_rows(src: &Tensor, indices: &[usize]) -> Result<Tensor> {
    if src.shape().len() != 2 {
        return Err(mismatch(
            "gather_rows",
            format!("source must be rank 2, got {:?}", src.shape()),
        ));
    }
    let (k, d) = (src.shape()[0], src.shape()[1]);
    for &i in indices {
        if i >= k {
            return Err(Error::IndexOutOfRange { index: i, k });
        }
    }
    let mut data = Vec::with_capacity(indices.len() * d);
    for &i in indices {
        data.extend_from_slice(&src.data()[i * d..(i + 1) * d]);
    }
    let idx = indices.to_vec();
    record("gather_rows", &[src], vec![indices.len(), d], data, |ids| {
        Op::GatherRows {
            src: ids[0],
            indices: idx,
        }
    })
}

fn rank3(op: &'static str, shape: &[usize]) -> Result<[usize; 3]> {
    if shape.len() == 3 {
        Ok([shape[0], shape[1], shape[2]])
    } else {
        Err(mismatch(op, format!("rank-3 tensor required, got {shape:?}")))
    }
}

fn axis_strides(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let ext = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, ext, inner)
}

/// Index pairs (folded, spatial) of the space-to-depth permutation for
/// an `[h, w, c]` tensor and block size `b`.
fn s2d_map(h: usize, w: usize, c: usize, b: usize) -> impl Iterator<Item = (usize, usize)> {
    let (oh, ow) = (h / b, w / b);
    let oc = b * b * c;
    (0..oh).flat_map(move |i| {
        (0..ow).flat_map(move |j| {
            (0..b).flat_map(move |di| {
                (0..b).flat_map(move |dj| {
                    (0..c).map(move |ch| {
                        let folded = (i * ow + j) * oc + ((di * b + dj) * c + ch);
                        let spatial = ((i * b + di) * w + (j * b + dj)) * c + ch;
                        (folded, spatial)
                    })
                })
            })
        })
    })
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            let orow = &mut out[i * m..(i + 1) * m];
            for j in 0..m {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], n: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[j * n + i] = a[i * m + j];
        }
    }
    out
}

fn acc(grads: &mut [Option<Vec<f64>>], id: usize, len: usize, mut write: impl FnMut(&mut [f64])) {
    let slot = grads[id].get_or_insert_with(|| vec![0.0; len]);
    write(slot);
}

/// Routes the gradient `g` of node `id` to its parents.
pub(crate) fn accumulate_parents(
    nodes: &[NodeRec],
    grads: &mut [Option<Vec<f64>>],
    id: usize,
    g: &[f64],
) {
    let op = nodes[id].op.clone();
    match op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            acc(grads, a, nodes[a].value.len(), |s| {
                for (si, gi) in s.iter_mut().zip(g) {
                    *si += gi;
                }
            });
            acc(grads, b, nodes[b].value.len(), |s| {
                for (si, gi) in s.iter_mut().zip(g) {
                    *si += gi;
                }
            });
        }
        Op::Sub(a, b) => {
            acc(grads, a, nodes[a].value.len(), |s| {
                for (si, gi) in s.iter_mut().zip(g) {
                    *si += gi;
                }
            });
            acc(grads, b, nodes[b].value.len(), |s| {
                for (si, gi) in s.iter_mut().zip(g) {
                    *si -= gi;
                }
            });
        }
        Op::Mul(a, b) => {
            let (av, bv) = (&nodes[a].value, &nodes[b].value);
            acc(grads, a, av.len(), |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * bv[i];
                }
            });
            acc(grads, b, bv.len(), |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * av[i];
                }
            });
        }
        Op::Scale(a, c) => {
            acc(grads, a, nodes[a].value.len(), |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * c;
                }
            });
        }
        Op::AddRow { mat, row } => {
            let m = nodes[row].value.len();
            acc(grads, mat, nodes[mat].value.len(), |s| {
                for (si, gi) in s.iter_mut().zip(g) {
                    *si += gi;
                }
            });
            acc(grads, row, m, |s| {
                for (i, gi) in g.iter().enumerate() {
                    s[i % m] += gi;
                }
            });
        }
        Op::MatMul { a, b } => {
            let n = nodes[a].shape[0];
            let k = nodes[a].shape[1];
            let m = nodes[b].shape[1];
            // dA = G B^T, dB = A^T G
            let bt = transpose_raw(&nodes[b].value, k, m);
            let da = matmul_raw(g, &bt, n, m, k);
            let at = transpose_raw(&nodes[a].value, n, k);
            let db = matmul_raw(&at, g, k, n, m);
            acc(grads, a, da.len(), |s| {
                for i in 0..s.len() {
                    s[i] += da[i];
                }
            });
            acc(grads, b, db.len(), |s| {
                for i in 0..s.len() {
                    s[i] += db[i];
                }
            });
        }
        Op::Reshape(a) => {
            acc(grads, a, nodes[a].value.len(), |s| {
                for (si, gi) in s.iter_mut().zip(g) {
                    *si += gi;
                }
            });
        }
        Op::Row { src, index } => {
            let inner = g.len();
            acc(grads, src, nodes[src].value.len(), |s| {
                for (i, gi) in g.iter().enumerate() {
                    s[index * inner + i] += gi;
                }
            });
        }
        Op::Concat { parts } => {
            let mut offset = 0;
            for p in parts {
                let len = nodes[p].value.len();
                let piece = &g[offset..offset + len];
                acc(grads, p, len, |s| {
                    for (si, gi) in s.iter_mut().zip(piece) {
                        *si += gi;
                    }
                });
                offset += len;
            }
        }
        Op::SumAll(a) => {
            let gv = g[0];
            acc(grads, a, nodes[a].value.len(), |s| {
                for si in s.iter_mut() {
                    *si += gv;
                }
            });
        }
        Op::MeanAll(a) => {
            let n = nodes[a].value.len();
            let gv = g[0] / n as f64;
            acc(grads, a, n, |s| {
                for si in s.iter_mut() {
                    *si += gv;
                }
            });
        }
        Op::MeanAxis { src, axis } => {
            let (outer, ext, inner) = axis_strides(&nodes[src].shape, axis);
            acc(grads, src, nodes[src].value.len(), |s| {
                for o in 0..outer {
                    for e in 0..ext {
                        let base = (o * ext + e) * inner;
                        for i in 0..inner {
                            s[base + i] += g[o * inner + i] / ext as f64;
                        }
                    }
                }
            });
        }
        Op::Relu(a) => {
            let av = &nodes[a].value;
            acc(grads, a, av.len(), |s| {
                for i in 0..s.len() {
                    if av[i] > 0.0 {
                        s[i] += g[i];
                    }
                }
            });
        }
        Op::Exp(a) => {
            let out = &nodes[id].value;
            acc(grads, a, out.len(), |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * out[i];
                }
            });
        }
        Op::Square(a) => {
            let av = &nodes[a].value;
            acc(grads, a, av.len(), |s| {
                for i in 0..s.len() {
                    s[i] += 2.0 * av[i] * g[i];
                }
            });
        }
        Op::Sqrt(a) => {
            let out = &nodes[id].value;
            acc(grads, a, out.len(), |s| {
                for i in 0..s.len() {
                    s[i] += g[i] / (2.0 * out[i]);
                }
            });
        }
        Op::L2Norm(a) => {
            let norm = nodes[id].value[0];
            let av = &nodes[a].value;
            if norm > 0.0 {
                acc(grads, a, av.len(), |s| {
                    for i in 0..s.len() {
                        s[i] += g[0] * av[i] / norm;
                    }
                });
            } else {
                // Subgradient zero at the origin.
                acc(grads, a, av.len(), |_| {});
            }
        }
        Op::GatherRows { src, indices } => {
            let d = nodes[src].shape[1];
            acc(grads, src, nodes[src].value.len(), |s| {
                for (r, &i) in indices.iter().enumerate() {
                    for j in 0..d {
                        s[i * d + j] += g[r * d + j];
                    }
                }
            });
        }
        Op::SpaceToDepth { src, block } => {
            let [h, w, c] = [
                nodes[src].shape[0],
                nodes[src].shape[1],
                nodes[src].shape[2],
            ];
            acc(grads, src, nodes[src].value.len(), |s| {
                for (folded, spatial) in s2d_map(h, w, c, block) {
                    s[spatial] += g[folded];
                }
            });
        }
        Op::DepthToSpace { src, block } => {
            let sh = &nodes[src].shape;
            let c = sh[2] / (block * block);
            acc(grads, src, nodes[src].value.len(), |s| {
                for (folded, spatial) in s2d_map(sh[0] * block, sh[1] * block, c, block) {
                    s[folded] += g[spatial];
                }
            });
        }
    }
}
