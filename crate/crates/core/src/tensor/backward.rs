use super::kernels;
use super::ops::{cosine, BinaryOp, ReduceOp};
use super::{Node, Op, TapeInner};

fn slot<'a>(grads: &'a mut [Option<Vec<f32>>], id: usize, len: usize) -> &'a mut Vec<f32> {
    grads[id].get_or_insert_with(|| vec![0.0; len])
}

/// Reverse traversal from `root`. Returns the visited op ids in order.
pub(super) fn run(inner: &mut TapeInner, root: usize) -> Vec<usize> {
    let nodes = &inner.nodes;
    let mut grads: Vec<Option<Vec<f32>>> = vec![None; root + 1];
    grads[root] = Some(vec![1.0]);
    let mut visited = Vec::new();

    for id in (0..=root).rev() {
        let node = &nodes[id];
        if !node.requires_grad {
            continue;
        }
        let Some(g) = grads[id].take() else {
            continue;
        };
        visited.push(id);
        propagate(nodes, node, &g, &mut grads);
        grads[id] = Some(g);
    }

    let nodes = &mut inner.nodes;
    for (id, node) in nodes.iter_mut().enumerate() {
        node.grad = if node.requires_grad {
            // Reachable or not, every differentiable tensor gets a full buffer.
            Some(grads.get_mut(id).and_then(Option::take).unwrap_or_else(|| vec![0.0; node.value.len()]))
        } else {
            None
        };
    }
    visited
}

fn propagate(nodes: &[Node], node: &Node, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
    let rg = |id: usize| nodes[id].requires_grad;
    match &node.op {
        Op::Leaf => {}
        Op::Unary { x, op } => {
            if rg(*x) {
                let xv = &nodes[*x].value;
                let dst = slot(grads, *x, xv.len());
                for i in 0..g.len() {
                    dst[i] += g[i] * op.derivative(xv[i], node.value[i]);
                }
            }
        }
        Op::Binary { a, b, op } => binary(nodes, node, *a, *b, *op, g, grads),
        Op::MatMul { a, b } => {
            let (an, bn) = (&nodes[*a], &nodes[*b]);
            let (m, k) = (an.shape[0], an.shape[1]);
            let n = bn.shape[1];
            if rg(*a) {
                let da = kernels::matmul_nt(g, &bn.value, m, n, k);
                add_into(slot(grads, *a, m * k), &da);
            }
            if rg(*b) {
                let db = kernels::matmul_tn(&an.value, g, m, k, n);
                add_into(slot(grads, *b, k * n), &db);
            }
        }
        Op::Transpose { x } => {
            if rg(*x) {
                let (r, c) = (nodes[*x].shape[0], nodes[*x].shape[1]);
                let dst = slot(grads, *x, r * c);
                for i in 0..r {
                    for j in 0..c {
                        dst[i * c + j] += g[j * r + i];
                    }
                }
            }
        }
        Op::Reshape { x } => {
            if rg(*x) {
                add_into(slot(grads, *x, g.len()), g);
            }
        }
        Op::Reduce { x, op, axis } => {
            if rg(*x) {
                let xn = &nodes[*x];
                let (outer, n, inner) = kernels::axis_split(&xn.shape, *axis);
                let dst = slot(grads, *x, xn.value.len());
                for o in 0..outer {
                    for i in 0..inner {
                        let gi = g[o * inner + i];
                        let y = node.value[o * inner + i];
                        let base = o * n * inner + i;
                        match op {
                            ReduceOp::Sum => (0..n).for_each(|j| dst[base + j * inner] += gi),
                            ReduceOp::Mean => {
                                let s = gi / n as f32;
                                (0..n).for_each(|j| dst[base + j * inner] += s);
                            }
                            ReduceOp::Max => {
                                if let Some(j) = (0..n).find(|&j| xn.value[base + j * inner] == y) {
                                    dst[base + j * inner] += gi;
                                }
                            }
                            ReduceOp::LogSumExp => {
                                for j in 0..n {
                                    let p = ((xn.value[base + j * inner] - y) as f64).exp();
                                    dst[base + j * inner] += (gi as f64 * p) as f32;
                                }
                            }
                        }
                    }
                }
            }
        }
        Op::Narrow { x, axis, start } => {
            if rg(*x) {
                let xn = &nodes[*x];
                let (outer, n, inner) = kernels::axis_split(&xn.shape, *axis);
                let len = node.shape[*axis];
                let dst = slot(grads, *x, xn.value.len());
                for o in 0..outer {
                    let base = (o * n + start) * inner;
                    add_into(&mut dst[base..base + len * inner], &g[o * len * inner..(o + 1) * len * inner]);
                }
            }
        }
        Op::Concat { xs, axis } => {
            let (outer, total, inner) = kernels::axis_split(&node.shape, *axis);
            let mut offset = 0;
            for &x in xs {
                let xn = &nodes[x];
                let n = xn.shape[*axis];
                if rg(x) {
                    let dst = slot(grads, x, xn.value.len());
                    for o in 0..outer {
                        let src = (o * total + offset) * inner;
                        add_into(&mut dst[o * n * inner..(o + 1) * n * inner], &g[src..src + n * inner]);
                    }
                }
                offset += n;
            }
        }
        Op::IndexSelect { x, indices } => {
            if rg(*x) {
                let xn = &nodes[*x];
                let row_len: usize = xn.shape[1..].iter().product();
                let dst = slot(grads, *x, xn.value.len());
                for (r, &i) in indices.iter().enumerate() {
                    add_into(&mut dst[i * row_len..(i + 1) * row_len], &g[r * row_len..(r + 1) * row_len]);
                }
            }
        }
        Op::Conv1d { x, w, b, stride, padding } => {
            let (xn, wn) = (&nodes[*x], &nodes[*w]);
            let (c_in, len) = (xn.shape[0], xn.shape[1]);
            let (c_out, kernel) = (wn.shape[0], wn.shape[2]);
            let l_out = node.shape[1];
            if rg(*b) {
                let dst = slot(grads, *b, c_out);
                for (d, row) in dst.iter_mut().zip(g.chunks(l_out)) {
                    *d += row.iter().map(|&v| v as f64).sum::<f64>() as f32;
                }
            }
            if rg(*w) {
                let cols = kernels::im2col(&xn.value, c_in, len, kernel, *stride, *padding, l_out);
                let dw = kernels::matmul_nt(g, &cols, c_out, l_out, c_in * kernel);
                add_into(slot(grads, *w, dw.len()), &dw);
            }
            if rg(*x) {
                let dcols = kernels::matmul_tn(&wn.value, g, c_out, c_in * kernel, l_out);
                let dx = kernels::col2im(&dcols, c_in, len, kernel, *stride, *padding, l_out);
                add_into(slot(grads, *x, dx.len()), &dx);
            }
        }
        Op::GroupNorm { x, gamma, beta, groups, stats } => {
            let xn = &nodes[*x];
            let gm = &nodes[*gamma].value;
            let (c, len) = (xn.shape[0], xn.shape[1]);
            let ch_per = c / groups;
            let count = (ch_per * len) as f64;
            let mut dx = vec![0.0f32; c * len];
            let mut dgamma = vec![0.0f32; c];
            let mut dbeta = vec![0.0f32; c];
            for (grp, &(mean, rstd)) in stats.iter().enumerate() {
                let (mean, rstd) = (mean as f64, rstd as f64);
                let mut sum_d = 0.0f64;
                let mut sum_dx = 0.0f64;
                for ch in grp * ch_per..(grp + 1) * ch_per {
                    let (mut dg, mut db) = (0.0f64, 0.0f64);
                    for t in 0..len {
                        let i = ch * len + t;
                        let xhat = (xn.value[i] as f64 - mean) * rstd;
                        let gi = g[i] as f64;
                        dg += gi * xhat;
                        db += gi;
                        let dxhat = gi * gm[ch] as f64;
                        sum_d += dxhat;
                        sum_dx += dxhat * xhat;
                    }
                    dgamma[ch] = dg as f32;
                    dbeta[ch] = db as f32;
                }
                for ch in grp * ch_per..(grp + 1) * ch_per {
                    for t in 0..len {
                        let i = ch * len + t;
                        let xhat = (xn.value[i] as f64 - mean) * rstd;
                        let dxhat = g[i] as f64 * gm[ch] as f64;
                        dx[i] = (rstd / count * (count * dxhat - sum_d - xhat * sum_dx)) as f32;
                    }
                }
            }
            if rg(*x) {
                add_into(slot(grads, *x, dx.len()), &dx);
            }
            if rg(*gamma) {
                add_into(slot(grads, *gamma, c), &dgamma);
            }
            if rg(*beta) {
                add_into(slot(grads, *beta, c), &dbeta);
            }
        }
        Op::CosineRows { a, b } => {
            let (an, bn) = (&nodes[*a], &nodes[*b]);
            let d = an.shape[1];
            let mut da = vec![0.0f32; an.value.len()];
            let mut db = vec![0.0f32; bn.value.len()];
            for (i, &gi) in g.iter().enumerate() {
                let ra = &an.value[i * d..(i + 1) * d];
                let rb = &bn.value[i * d..(i + 1) * d];
                let (sim, na, nb) = cosine(ra, rb);
                if na * nb == 0.0 {
                    continue;
                }
                let gi = gi as f64;
                for j in 0..d {
                    let (x, y) = (ra[j] as f64, rb[j] as f64);
                    da[i * d + j] = (gi * (y / (na * nb) - sim * x / (na * na))) as f32;
                    db[i * d + j] = (gi * (x / (na * nb) - sim * y / (nb * nb))) as f32;
                }
            }
            if rg(*a) {
                add_into(slot(grads, *a, da.len()), &da);
            }
            if rg(*b) {
                add_into(slot(grads, *b, db.len()), &db);
            }
        }
        Op::StraightThrough { soft } => {
            if rg(*soft) {
                add_into(slot(grads, *soft, g.len()), g);
            }
        }
        Op::Precomputed { x, grad } => {
            if rg(*x) {
                let dst = slot(grads, *x, grad.len());
                for (d, &p) in dst.iter_mut().zip(grad.iter()) {
                    *d += g[0] * p;
                }
            }
        }
    }
}

fn binary(nodes: &[Node], node: &Node, a: usize, b: usize, op: BinaryOp, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
    let (an, bn) = (&nodes[a], &nodes[b]);
    // Local partials given (a, b).
    let partials = |x: f32, y: f32| -> (f32, f32) {
        match op {
            BinaryOp::Add => (1.0, 1.0),
            BinaryOp::Sub => (1.0, -1.0),
            BinaryOp::Mul => (y, x),
            BinaryOp::Div => (1.0 / y, -x / (y * y)),
        }
    };
    let mut da = an.requires_grad.then(|| vec![0.0f32; an.value.len()]);
    let mut db = bn.requires_grad.then(|| vec![0.0f32; bn.value.len()]);
    if an.shape == bn.shape {
        for i in 0..g.len() {
            let (pa, pb) = partials(an.value[i], bn.value[i]);
            if let Some(da) = da.as_mut() {
                da[i] += g[i] * pa;
            }
            if let Some(db) = db.as_mut() {
                db[i] += g[i] * pb;
            }
        }
    } else {
        let sa = kernels::broadcast_strides(&an.shape, &node.shape);
        let sb = kernels::broadcast_strides(&bn.shape, &node.shape);
        // Broadcast dimensions are summed in f64.
        let mut acc_a = da.as_ref().map(|v| vec![0.0f64; v.len()]);
        let mut acc_b = db.as_ref().map(|v| vec![0.0f64; v.len()]);
        kernels::for_each_broadcast(&node.shape, &sa, &sb, |i, ia, ib| {
            let (pa, pb) = partials(an.value[ia], bn.value[ib]);
            if let Some(acc) = acc_a.as_mut() {
                acc[ia] += (g[i] * pa) as f64;
            }
            if let Some(acc) = acc_b.as_mut() {
                acc[ib] += (g[i] * pb) as f64;
            }
        });
        if let (Some(da), Some(acc)) = (da.as_mut(), acc_a) {
            da.iter_mut().zip(acc).for_each(|(d, v)| *d = v as f32);
        }
        if let (Some(db), Some(acc)) = (db.as_mut(), acc_b) {
            db.iter_mut().zip(acc).for_each(|(d, v)| *d = v as f32);
        }
    }
    if let Some(da) = da {
        add_into(slot(grads, a, da.len()), &da);
    }
    if let Some(db) = db {
        add_into(slot(grads, b, db.len()), &db);
    }
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
