//! Forward and backward passes.
//!
//! Batches are stacked row-wise into `(batch * seq_len) x dim` matrices so
//! position-wise layers become single products. Every reduction runs in a
//! fixed order and every sample's rows are computed independently of the
//! rest of the batch, so per-sample results are identical whether the sample
//! is scored alone or inside a larger batch.

use crate::error::{Error, Result};
use crate::featurize::{FeatureConfig, FeatureMatrix};
use crate::linalg::{matmul, matmul_a_bt, matmul_at_b, Matrix};

use super::{
    Affine, AttentionLayer, Backbone, HeadParams, LayerNormParams, LstmLayer, ModelConfig,
    SharedParams,
};

const LN_EPS: f64 = 1e-5;

/// Stacked model input.
pub(crate) struct Batch {
    pub x: Matrix,
    pub b: usize,
    pub l: usize,
    /// Per stacked row: true if the input row has any nonzero entry. Only
    /// consulted when `mask_padding` is set.
    pub real: Vec<bool>,
}

impl Batch {
    pub fn new(
        feats: &[&FeatureMatrix],
        feature: &FeatureConfig,
        config: &ModelConfig,
    ) -> Result<Self> {
        if feats.is_empty() {
            return Err(Error::Validation("empty batch".into()));
        }
        let l = feats[0].rows();
        let e = feats[0].cols();
        if e != feature.embedding_size {
            return Err(Error::Config(format!(
                "input has {} feature columns, model expects {}",
                e, feature.embedding_size
            )));
        }
        if config.positional_encoding && l != feature.sequence_length {
            return Err(Error::Config(format!(
                "positional encoding requires sequence length {}, got {}",
                feature.sequence_length, l
            )));
        }
        let expected_digest = feature.digest();
        let mut x = Matrix::zeros(feats.len() * l, e);
        let mut real = Vec::with_capacity(feats.len() * l);
        for (s, m) in feats.iter().enumerate() {
            if m.rows() != l || m.cols() != e {
                return Err(Error::Config(
                    "all matrices in a batch must share one shape".into(),
                ));
            }
            if m.config_digest != 0 && m.config_digest != expected_digest {
                return Err(Error::Config(
                    "feature matrix was extracted under a different feature config".into(),
                ));
            }
            x.data[s * l * e..(s + 1) * l * e].copy_from_slice(m.values());
            for r in 0..l {
                real.push(m.row(r).iter().any(|&v| v != 0.0));
            }
        }
        Ok(Self {
            x,
            b: feats.len(),
            l,
            real,
        })
    }
}

pub(crate) struct AttnTrace {
    input: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    attn: Vec<Matrix>,
    o: Matrix,
    ln: Option<LnTrace>,
}

pub(crate) struct LnTrace {
    normalized: Matrix,
    inv_std: Vec<f64>,
}

pub(crate) struct LstmStep {
    gates: Matrix,
    c: Matrix,
    tanh_c: Matrix,
    h: Matrix,
}

pub(crate) struct LstmTrace {
    input: Matrix,
    steps: Vec<LstmStep>,
}

pub(crate) enum LayerTrace {
    Attention(AttnTrace),
    Lstm(LstmTrace),
}

pub(crate) struct BlockTrace {
    input: Matrix,
    r1_pre: Matrix,
    r1: Matrix,
}

pub(crate) struct Trace {
    pub scores: Vec<f64>,
    u1_pre: Matrix,
    u1: Matrix,
    u2_pre: Matrix,
    layers: Vec<LayerTrace>,
    blocks: Vec<BlockTrace>,
    z: Matrix,
    hh_pre: Matrix,
    hh: Matrix,
}

fn affine(x: &Matrix, a: &Affine) -> Matrix {
    let mut y = matmul(x, &a.w);
    y.add_row_bias(&a.b);
    y
}

/// Copies the `[c0, c0+width)` columns of rows `[row0, row0+nrows)`.
fn slice_block(m: &Matrix, row0: usize, nrows: usize, c0: usize, width: usize) -> Matrix {
    let mut out = Matrix::zeros(nrows, width);
    for r in 0..nrows {
        let src = &m.row(row0 + r)[c0..c0 + width];
        out.row_mut(r).copy_from_slice(src);
    }
    out
}

fn write_block(dst: &mut Matrix, row0: usize, c0: usize, src: &Matrix) {
    for r in 0..src.rows {
        let cols = dst.cols;
        dst.data[(row0 + r) * cols + c0..(row0 + r) * cols + c0 + src.cols]
            .copy_from_slice(src.row(r));
    }
}

fn attention_forward(
    layer: &AttentionLayer,
    input: &Matrix,
    batch: &Batch,
    config: &ModelConfig,
) -> (Matrix, AttnTrace) {
    let h = layer.query.w.cols;
    let heads = config.attention_heads;
    let d = h / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let l = batch.l;

    let q = affine(input, &layer.query);
    let k = affine(input, &layer.key);
    let v = affine(input, &layer.value);

    let mut o = Matrix::zeros(input.rows, h);
    let mut attn = Vec::with_capacity(batch.b * heads);
    for s in 0..batch.b {
        let row0 = s * l;
        for head in 0..heads {
            let c0 = head * d;
            let qh = slice_block(&q, row0, l, c0, d);
            let kh = slice_block(&k, row0, l, c0, d);
            let vh = slice_block(&v, row0, l, c0, d);
            let mut sc = matmul_a_bt(&qh, &kh);
            sc.scale(scale);
            let mut a = Matrix::zeros(l, l);
            for i in 0..l {
                if config.mask_padding && !batch.real[row0 + i] {
                    continue; // padded queries produce no attention output
                }
                let row = sc.row(i);
                let mut max = f64::NEG_INFINITY;
                for (j, &val) in row.iter().enumerate() {
                    if config.mask_padding && !batch.real[row0 + j] {
                        continue;
                    }
                    if val > max {
                        max = val;
                    }
                }
                if max == f64::NEG_INFINITY {
                    continue;
                }
                let mut sum = 0.0;
                let mut exps = vec![0.0; l];
                for (j, &val) in row.iter().enumerate() {
                    if config.mask_padding && !batch.real[row0 + j] {
                        continue;
                    }
                    let e = (val - max).exp();
                    exps[j] = e;
                    sum += e;
                }
                for (j, e) in exps.into_iter().enumerate() {
                    a.set(i, j, e / sum);
                }
            }
            let oh = matmul(&a, &vh);
            write_block(&mut o, row0, c0, &oh);
            attn.push(a);
        }
    }

    let proj = affine(&o, &layer.output);
    let mut resid = input.clone();
    resid.add_assign(&proj);

    let (out, ln) = match &layer.norm {
        Some(norm) => {
            let (y, trace) = layer_norm_forward(&resid, norm);
            (y, Some(trace))
        }
        None => (resid, None),
    };

    (
        out,
        AttnTrace {
            input: input.clone(),
            q,
            k,
            v,
            attn,
            o,
            ln,
        },
    )
}

fn layer_norm_forward(x: &Matrix, params: &LayerNormParams) -> (Matrix, LnTrace) {
    let n = x.cols as f64;
    let mut normalized = Matrix::zeros(x.rows, x.cols);
    let mut inv_std = Vec::with_capacity(x.rows);
    let mut y = Matrix::zeros(x.rows, x.cols);
    for r in 0..x.rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let istd = 1.0 / (var + LN_EPS).sqrt();
        inv_std.push(istd);
        for c in 0..x.cols {
            let nv = (row[c] - mean) * istd;
            normalized.set(r, c, nv);
            y.set(r, c, params.gamma.data[c] * nv + params.beta.data[c]);
        }
    }
    (y, LnTrace { normalized, inv_std })
}

fn layer_norm_backward(
    trace: &LnTrace,
    params: &LayerNormParams,
    dy: &Matrix,
    dgamma: &mut Matrix,
    dbeta: &mut Matrix,
) -> Matrix {
    let n = dy.cols as f64;
    let mut dx = Matrix::zeros(dy.rows, dy.cols);
    for r in 0..dy.rows {
        let dyr = dy.row(r);
        let nr = trace.normalized.row(r);
        for c in 0..dy.cols {
            dgamma.data[c] += dyr[c] * nr[c];
            dbeta.data[c] += dyr[c];
        }
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        let mut dn = vec![0.0; dy.cols];
        for c in 0..dy.cols {
            dn[c] = dyr[c] * params.gamma.data[c];
            m1 += dn[c];
            m2 += dn[c] * nr[c];
        }
        m1 /= n;
        m2 /= n;
        let istd = trace.inv_std[r];
        for c in 0..dy.cols {
            dx.set(r, c, istd * (dn[c] - m1 - nr[c] * m2));
        }
    }
    dx
}

fn lstm_forward(layer: &LstmLayer, input: &Matrix, batch: &Batch) -> (Matrix, LstmTrace) {
    let h = layer.wh.rows;
    let b = batch.b;
    let l = batch.l;
    let mut out = Matrix::zeros(input.rows, h);
    let mut steps = Vec::with_capacity(l);
    let mut h_prev = Matrix::zeros(b, h);
    let mut c_prev = Matrix::zeros(b, h);
    for t in 0..l {
        let idx: Vec<usize> = (0..b).map(|s| s * l + t).collect();
        let xt = input.gather_rows(&idx);
        let mut pre = matmul(&xt, &layer.wx);
        pre.add_assign(&matmul(&h_prev, &layer.wh));
        pre.add_row_bias(&layer.b);

        let mut gates = Matrix::zeros(b, 4 * h);
        let mut c = Matrix::zeros(b, h);
        let mut tanh_c = Matrix::zeros(b, h);
        let mut hidden = Matrix::zeros(b, h);
        for s in 0..b {
            for j in 0..h {
                let i_g = sigmoid(pre.get(s, j));
                let f_g = sigmoid(pre.get(s, h + j));
                let g_g = pre.get(s, 2 * h + j).tanh();
                let o_g = sigmoid(pre.get(s, 3 * h + j));
                gates.set(s, j, i_g);
                gates.set(s, h + j, f_g);
                gates.set(s, 2 * h + j, g_g);
                gates.set(s, 3 * h + j, o_g);
                let cv = f_g * c_prev.get(s, j) + i_g * g_g;
                c.set(s, j, cv);
                let tc = cv.tanh();
                tanh_c.set(s, j, tc);
                hidden.set(s, j, o_g * tc);
            }
        }
        for (s, &row) in idx.iter().enumerate() {
            out.row_mut(row).copy_from_slice(hidden.row(s));
        }
        h_prev = hidden.clone();
        c_prev = c.clone();
        steps.push(LstmStep {
            gates,
            c,
            tanh_c,
            h: hidden,
        });
    }
    (
        out,
        LstmTrace {
            input: input.clone(),
            steps,
        },
    )
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn forward(
    shared: &SharedParams,
    head: &HeadParams,
    config: &ModelConfig,
    batch: &Batch,
) -> Trace {
    let u1_pre = affine(&batch.x, &shared.up1);
    let u1 = u1_pre.relu();
    let u2_pre = affine(&u1, &shared.up2);
    let mut h0 = u2_pre.relu();
    if let Some(pos) = &shared.positional {
        for s in 0..batch.b {
            for t in 0..batch.l {
                let row = s * batch.l + t;
                let cols = h0.cols;
                for c in 0..cols {
                    h0.data[row * cols + c] += pos.get(t, c);
                }
            }
        }
    }

    let mut layers = Vec::new();
    let mut cur = h0.clone();
    match &shared.backbone {
        Backbone::Attention(attn_layers) => {
            for layer in attn_layers {
                let (next, trace) = attention_forward(layer, &cur, batch, config);
                layers.push(LayerTrace::Attention(trace));
                cur = next;
            }
        }
        Backbone::Lstm(lstm_layers) => {
            for layer in lstm_layers {
                let (next, trace) = lstm_forward(layer, &cur, batch);
                layers.push(LayerTrace::Lstm(trace));
                cur = next;
            }
        }
    }

    let mut blocks = Vec::new();
    for block in &shared.blocks {
        let r1_pre = affine(&cur, &block.a1);
        let r1 = r1_pre.relu();
        let r2 = affine(&r1, &block.a2);
        let mut next = cur.clone();
        next.add_assign(&r2);
        blocks.push(BlockTrace {
            input: cur,
            r1_pre,
            r1,
        });
        cur = next;
    }

    let z = cur;
    let hh_pre = affine(&z, &head.a1);
    let hh = hh_pre.relu();
    let spos = affine(&hh, &head.a2);

    let mut scores = vec![0.0; batch.b];
    for s in 0..batch.b {
        let mut acc = 0.0;
        for t in 0..batch.l {
            acc += spos.get(s * batch.l + t, 0);
        }
        scores[s] = acc;
    }

    Trace {
        scores,
        u1_pre,
        u1,
        u2_pre,
        layers,
        blocks,
        z,
        hh_pre,
        hh,
    }
}

fn zero_grads_like_shared(shared: &SharedParams) -> SharedParams {
    let mut g = shared.clone();
    for (_, t) in g.tensors_mut() {
        t.data.fill(0.0);
    }
    g
}

fn zero_grads_like_head(head: &HeadParams) -> HeadParams {
    let mut g = head.clone();
    for (_, t) in g.tensors_mut() {
        t.data.fill(0.0);
    }
    g
}

fn attention_backward(
    layer: &AttentionLayer,
    trace: &AttnTrace,
    batch: &Batch,
    config: &ModelConfig,
    dout: &Matrix,
    grads: (&mut AttentionLayer,),
) -> Matrix {
    let g = grads.0;
    let h = layer.query.w.cols;
    let heads = config.attention_heads;
    let d = h / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let l = batch.l;

    let dresid = match (&layer.norm, &trace.ln) {
        (Some(norm), Some(ln_trace)) => {
            let gn = g.norm.as_mut().expect("grad norm present");
            layer_norm_backward(ln_trace, norm, dout, &mut gn.gamma, &mut gn.beta)
        }
        _ => dout.clone(),
    };

    // residual identity path
    let mut dinput = dresid.clone();

    // projection
    g.output.w.add_assign(&matmul_at_b(&trace.o, &dresid));
    g.output.b.add_assign(&dresid.col_sums());
    let mut d_o = matmul_a_bt(&dresid, &layer.output.w);
    if config.mask_padding {
        for (row, &real) in batch.real.iter().enumerate() {
            if !real {
                d_o.row_mut(row).fill(0.0);
            }
        }
    }

    let mut dq = Matrix::zeros(trace.q.rows, h);
    let mut dk = Matrix::zeros(trace.k.rows, h);
    let mut dv = Matrix::zeros(trace.v.rows, h);
    for s in 0..batch.b {
        let row0 = s * l;
        for head in 0..heads {
            let c0 = head * d;
            let a = &trace.attn[s * heads + head];
            let qh = slice_block(&trace.q, row0, l, c0, d);
            let kh = slice_block(&trace.k, row0, l, c0, d);
            let vh = slice_block(&trace.v, row0, l, c0, d);
            let doh = slice_block(&d_o, row0, l, c0, d);

            let da = matmul_a_bt(&doh, &vh);
            let dvh = matmul_at_b(a, &doh);

            // softmax backward per row: ds = a * (da - sum(da * a))
            let mut ds = Matrix::zeros(l, l);
            for i in 0..l {
                let arow = a.row(i);
                let darow = da.row(i);
                let dot: f64 = arow.iter().zip(darow).map(|(x, y)| x * y).sum();
                for j in 0..l {
                    ds.set(i, j, arow[j] * (darow[j] - dot));
                }
            }
            ds.scale(scale);

            let dqh = matmul(&ds, &kh);
            let dkh = matmul_at_b(&ds, &qh);
            write_block(&mut dq, row0, c0, &dqh);
            write_block(&mut dk, row0, c0, &dkh);
            write_block(&mut dv, row0, c0, &dvh);
        }
    }

    g.query.w.add_assign(&matmul_at_b(&trace.input, &dq));
    g.query.b.add_assign(&dq.col_sums());
    g.key.w.add_assign(&matmul_at_b(&trace.input, &dk));
    g.key.b.add_assign(&dk.col_sums());
    g.value.w.add_assign(&matmul_at_b(&trace.input, &dv));
    g.value.b.add_assign(&dv.col_sums());

    dinput.add_assign(&matmul_a_bt(&dq, &layer.query.w));
    dinput.add_assign(&matmul_a_bt(&dk, &layer.key.w));
    dinput.add_assign(&matmul_a_bt(&dv, &layer.value.w));
    dinput
}

fn lstm_backward(
    layer: &LstmLayer,
    trace: &LstmTrace,
    batch: &Batch,
    dout: &Matrix,
    g: &mut LstmLayer,
) -> Matrix {
    let h = layer.wh.rows;
    let b = batch.b;
    let l = batch.l;
    let mut dinput = Matrix::zeros(trace.input.rows, layer.wx.rows);
    let mut dh_next = Matrix::zeros(b, h);
    let mut dc_next = Matrix::zeros(b, h);
    for t in (0..l).rev() {
        let idx: Vec<usize> = (0..b).map(|s| s * l + t).collect();
        let step = &trace.steps[t];
        let c_prev = if t == 0 {
            Matrix::zeros(b, h)
        } else {
            trace.steps[t - 1].c.clone()
        };
        let h_prev = if t == 0 {
            Matrix::zeros(b, h)
        } else {
            trace.steps[t - 1].h.clone()
        };

        let mut dgates = Matrix::zeros(b, 4 * h);
        let mut dc_prev = Matrix::zeros(b, h);
        for s in 0..b {
            for j in 0..h {
                let dh = dout.get(idx[s], j) + dh_next.get(s, j);
                let i_g = step.gates.get(s, j);
                let f_g = step.gates.get(s, h + j);
                let g_g = step.gates.get(s, 2 * h + j);
                let o_g = step.gates.get(s, 3 * h + j);
                let tc = step.tanh_c.get(s, j);

                let do_ = dh * tc;
                let dc = dc_next.get(s, j) + dh * o_g * (1.0 - tc * tc);
                let di = dc * g_g;
                let dg = dc * i_g;
                let df = dc * c_prev.get(s, j);
                dc_prev.set(s, j, dc * f_g);

                dgates.set(s, j, di * i_g * (1.0 - i_g));
                dgates.set(s, h + j, df * f_g * (1.0 - f_g));
                dgates.set(s, 2 * h + j, dg * (1.0 - g_g * g_g));
                dgates.set(s, 3 * h + j, do_ * o_g * (1.0 - o_g));
            }
        }

        let xt = trace.input.gather_rows(&idx);
        g.wx.add_assign(&matmul_at_b(&xt, &dgates));
        g.wh.add_assign(&matmul_at_b(&h_prev, &dgates));
        g.b.add_assign(&dgates.col_sums());

        let dxt = matmul_a_bt(&dgates, &layer.wx);
        for (s, &row) in idx.iter().enumerate() {
            dinput.row_mut(row).copy_from_slice(dxt.row(s));
        }
        dh_next = matmul_a_bt(&dgates, &layer.wh);
        dc_next = dc_prev;
    }
    dinput
}

pub(crate) fn backward(
    shared: &SharedParams,
    head: &HeadParams,
    config: &ModelConfig,
    batch: &Batch,
    trace: &Trace,
    dscores: &[f64],
) -> (SharedParams, HeadParams) {
    let mut gs = zero_grads_like_shared(shared);
    let mut gh = zero_grads_like_head(head);

    // per-position score gradient
    let mut dspos = Matrix::zeros(batch.b * batch.l, 1);
    for s in 0..batch.b {
        for t in 0..batch.l {
            dspos.set(s * batch.l + t, 0, dscores[s]);
        }
    }

    // head
    gh.a2.w.add_assign(&matmul_at_b(&trace.hh, &dspos));
    gh.a2.b.add_assign(&dspos.col_sums());
    let dhh = matmul_a_bt(&dspos, &head.a2.w);
    let dhh_pre = Matrix::relu_backward(&trace.hh_pre, &dhh);
    gh.a1.w.add_assign(&matmul_at_b(&trace.z, &dhh_pre));
    gh.a1.b.add_assign(&dhh_pre.col_sums());
    let mut dout = matmul_a_bt(&dhh_pre, &head.a1.w);

    // residual blocks, reversed
    for (bi, block) in shared.blocks.iter().enumerate().rev() {
        let btr = &trace.blocks[bi];
        let gblock = &mut gs.blocks[bi];
        let dr2 = &dout;
        gblock.a2.w.add_assign(&matmul_at_b(&btr.r1, dr2));
        gblock.a2.b.add_assign(&dr2.col_sums());
        let dr1 = matmul_a_bt(dr2, &block.a2.w);
        let dr1_pre = Matrix::relu_backward(&btr.r1_pre, &dr1);
        gblock.a1.w.add_assign(&matmul_at_b(&btr.input, &dr1_pre));
        gblock.a1.b.add_assign(&dr1_pre.col_sums());
        let mut dinput = dout.clone();
        dinput.add_assign(&matmul_a_bt(&dr1_pre, &block.a1.w));
        dout = dinput;
    }

    // backbone, reversed
    match (&shared.backbone, &mut gs.backbone) {
        (Backbone::Attention(layers), Backbone::Attention(glayers)) => {
            for (li, layer) in layers.iter().enumerate().rev() {
                let LayerTrace::Attention(tr) = &trace.layers[li] else {
                    unreachable!("trace kind matches backbone kind");
                };
                dout = attention_backward(layer, tr, batch, config, &dout, (&mut glayers[li],));
            }
        }
        (Backbone::Lstm(layers), Backbone::Lstm(glayers)) => {
            for (li, layer) in layers.iter().enumerate().rev() {
                let LayerTrace::Lstm(tr) = &trace.layers[li] else {
                    unreachable!("trace kind matches backbone kind");
                };
                dout = lstm_backward(layer, tr, batch, &dout, &mut glayers[li]);
            }
        }
        _ => unreachable!("gradient backbone kind matches parameter kind"),
    }

    // positional encoding
    if let Some(gpos) = &mut gs.positional {
        for t in 0..batch.l {
            for s in 0..batch.b {
                let row = s * batch.l + t;
                for c in 0..gpos.cols {
                    let v = gpos.get(t, c) + dout.get(row, c);
                    gpos.set(t, c, v);
                }
            }
        }
    }

    // upsampling
    let du2_pre = Matrix::relu_backward(&trace.u2_pre, &dout);
    gs.up2.w.add_assign(&matmul_at_b(&trace.u1, &du2_pre));
    gs.up2.b.add_assign(&du2_pre.col_sums());
    let du1 = matmul_a_bt(&du2_pre, &shared.up2.w);
    let du1_pre = Matrix::relu_backward(&trace.u1_pre, &du1);
    gs.up1.w.add_assign(&matmul_at_b(&batch.x, &du1_pre));
    gs.up1.b.add_assign(&du1_pre.col_sums());

    (gs, gh)
}
