//! Reference implementations used to cross-check the optimized paths.
//!
//! Everything here is written with plain index loops over the natural
//! `[C, T, V]` sample layout and shares no code with the tape or the GEMM
//! kernels.

use std::collections::VecDeque;

/// Triple-loop product of row-major `m x k` and `k x n` matrices.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * b[p * n + j];
            }
            out[i * n + j] = s;
        }
    }
    out
}

/// Sliding-window temporal convolution on one `[C_in, T, V]` sample.
///
/// `w[o][i][k]` maps input channel `i` at tap `k` to output channel `o`.
/// Returns `[C_out][T'][V]` with `T' = ceil(T / stride)`.
pub fn temporal_conv(
    x: &[Vec<Vec<f64>>],
    w: &[Vec<Vec<f64>>],
    dilation: usize,
    stride: usize,
) -> Vec<Vec<Vec<f64>>> {
    let c_in = x.len();
    let t = x[0].len();
    let v = x[0][0].len();
    let kernel = w[0][0].len();
    let pad = ((kernel - 1) * dilation / 2) as isize;
    let t_out = t.div_ceil(stride);
    let mut out = vec![vec![vec![0.0; v]; t_out]; w.len()];
    for (o, wo) in w.iter().enumerate() {
        for to in 0..t_out {
            for j in 0..v {
                let mut s = 0.0;
                for (i, wi) in wo.iter().enumerate().take(c_in) {
                    for (k, wk) in wi.iter().enumerate() {
                        let ti = (to * stride) as isize + (k * dilation) as isize - pad;
                        if ti >= 0 && (ti as usize) < t {
                            s += wk * x[i][ti as usize][j];
                        }
                    }
                }
                out[o][to][j] = s;
            }
        }
    }
    out
}

/// All-pairs hop counts by Floyd–Warshall; `None` marks unreachable pairs.
pub fn floyd_warshall(num_nodes: usize, edges: &[(usize, usize)]) -> Vec<Vec<Option<usize>>> {
    let mut d = vec![vec![None; num_nodes]; num_nodes];
    for (i, row) in d.iter_mut().enumerate() {
        row[i] = Some(0);
    }
    for &(a, b) in edges {
        d[a][b] = Some(1);
        d[b][a] = Some(1);
    }
    for k in 0..num_nodes {
        for i in 0..num_nodes {
            let Some(ik) = d[i][k] else { continue };
            for j in 0..num_nodes {
                if let Some(kj) = d[k][j] {
                    if d[i][j].is_none_or(|ij| ik + kj < ij) {
                        d[i][j] = Some(ik + kj);
                    }
                }
            }
        }
    }
    d
}

/// Single-source BFS levels, used to sanity check connectivity oracles.
pub fn bfs_levels(num_nodes: usize, edges: &[(usize, usize)], src: usize) -> Vec<Option<usize>> {
    let mut adj = vec![Vec::new(); num_nodes];
    for &(a, b) in edges {
        adj[a].push(b);
        adj[b].push(a);
    }
    let mut dist = vec![None; num_nodes];
    dist[src] = Some(0);
    let mut queue = VecDeque::from([src]);
    while let Some(u) = queue.pop_front() {
        for &w in &adj[u] {
            if dist[w].is_none() {
                dist[w] = Some(dist[u].unwrap() + 1);
                queue.push_back(w);
            }
        }
    }
    dist
}

/// Hyperedge features by explicit group loops: the mean of each group's
/// member rows, projected by `w_e`. `x` is `[V][C_in]`, `w_e` is `[C_in][C]`.
pub fn group_mean_project(
    x: &[Vec<f64>],
    assignment: &[usize],
    num_edges: usize,
    w_e: &[Vec<f64>],
) -> Vec<Vec<f64>> {
    let c_in = x[0].len();
    let c = w_e[0].len();
    let mut out = vec![vec![0.0; c]; num_edges];
    for (e, row) in out.iter_mut().enumerate() {
        let members: Vec<usize> = (0..x.len()).filter(|&v| assignment[v] == e).collect();
        let mut mean = vec![0.0; c_in];
        for &v in &members {
            for (m, &xv) in mean.iter_mut().zip(&x[v]) {
                *m += xv;
            }
        }
        for m in mean.iter_mut() {
            *m /= members.len() as f64;
        }
        for (o, slot) in row.iter_mut().enumerate() {
            *slot = (0..c_in).map(|i| mean[i] * w_e[i][o]).sum();
        }
    }
    out
}

/// Plain multi-head scaled dot-product self-attention over the joints of
/// every frame of one `[C_in][T][V]` sample. Returns `[C][T][V]`.
///
/// `w_qkv` is `[C_in][3C]` (query, key, value column blocks; channel
/// `h * head_dim + d` belongs to head `h`), `w_out` is `[C][C]`.
pub fn vanilla_self_attention(
    x: &[Vec<Vec<f64>>],
    w_qkv: &[Vec<f64>],
    w_out: &[Vec<f64>],
    b_out: &[f64],
    heads: usize,
) -> Vec<Vec<Vec<f64>>> {
    let c_in = x.len();
    let t = x[0].len();
    let v = x[0][0].len();
    let c = w_out.len();
    let hd = c / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut out = vec![vec![vec![0.0; v]; t]; c];
    for ti in 0..t {
        let proj = |j: usize, col: usize| -> f64 { (0..c_in).map(|i| x[i][ti][j] * w_qkv[i][col]).sum() };
        let q: Vec<Vec<f64>> = (0..v).map(|j| (0..c).map(|o| proj(j, o)).collect()).collect();
        let k: Vec<Vec<f64>> = (0..v).map(|j| (0..c).map(|o| proj(j, c + o)).collect()).collect();
        let val: Vec<Vec<f64>> = (0..v).map(|j| (0..c).map(|o| proj(j, 2 * c + o)).collect()).collect();
        let mut y = vec![vec![0.0; c]; v];
        for h in 0..heads {
            let lo = h * hd;
            for i in 0..v {
                let scores: Vec<f64> = (0..v)
                    .map(|j| scale * (lo..lo + hd).map(|d| q[i][d] * k[j][d]).sum::<f64>())
                    .collect();
                let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let z: f64 = exps.iter().sum();
                for d in lo..lo + hd {
                    y[i][d] = (0..v).map(|j| exps[j] / z * val[j][d]).sum();
                }
            }
        }
        for j in 0..v {
            for o in 0..c {
                out[o][ti][j] = b_out[o] + (0..c).map(|d| y[j][d] * w_out[d][o]).sum::<f64>();
            }
        }
    }
    out
}

/// Nearest-centroid classifier over flattened samples; returns accuracy of
/// leave-in classification of `samples` against per-class means.
pub fn nearest_centroid_accuracy(samples: &[Vec<f64>], labels: &[usize], num_classes: usize) -> f64 {
    let dim = samples[0].len();
    let mut centroids = vec![vec![0.0; dim]; num_classes];
    let mut counts = vec![0usize; num_classes];
    for (s, &l) in samples.iter().zip(labels) {
        counts[l] += 1;
        for (c, x) in centroids[l].iter_mut().zip(s) {
            *c += x;
        }
    }
    for (c, &n) in centroids.iter_mut().zip(&counts) {
        c.iter_mut().for_each(|x| *x /= n.max(1) as f64);
    }
    let correct = samples
        .iter()
        .zip(labels)
        .filter(|(s, &l)| {
            let best = (0..num_classes)
                .min_by(|&a, &b| {
                    let da: f64 = s.iter().zip(&centroids[a]).map(|(x, c)| (x - c).powi(2)).sum();
                    let db: f64 = s.iter().zip(&centroids[b]).map(|(x, c)| (x - c).powi(2)).sum();
                    da.total_cmp(&db)
                })
                .unwrap();
            best == l
        })
        .count();
    correct as f64 / samples.len() as f64
}
