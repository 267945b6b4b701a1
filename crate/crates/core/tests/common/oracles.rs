//! Slow reference implementations used only by tests.

use egl_core::lmm::AttentionTrace;

/// Triple loop over layers, heads and cells.
pub fn reduce_oracle(trace: &AttentionTrace, k: usize, h: usize, w: usize) -> Vec<f64> {
    let e = &trace.entries[k];
    let base = trace.visual.start;
    let mut out = vec![0.0; h * w];
    let mut count = 0.0;
    for layer in &e.layers {
        for row in layer {
            count += 1.0;
            for y in 0..h {
                for x in 0..w {
                    out[y * w + x] += row[base + y * w + x];
                }
            }
        }
    }
    out.iter().map(|v| v / count).collect()
}

/// Bilinear sample at output pixel `(y, x)` written from the interpolation formula
/// with explicit source coordinates.
pub fn bilinear_oracle(src: &[f64], sh: usize, sw: usize, oh: usize, ow: usize, y: usize, x: usize) -> f64 {
    let coord = |o: usize, out: usize, n: usize| {
        let c = (o as f64 + 0.5) / out as f64 * n as f64 - 0.5;
        c.max(0.0).min((n - 1) as f64)
    };
    let (cy, cx) = (coord(y, oh, sh), coord(x, ow, sw));
    let mut v = 0.0;
    for sy in 0..sh {
        for sx in 0..sw {
            let wy = (1.0 - (cy - sy as f64).abs()).max(0.0);
            let wx = (1.0 - (cx - sx as f64).abs()).max(0.0);
            v += wy * wx * src[sy * sw + sx];
        }
    }
    v
}

/// Largest value over every pixel, then the first pixel in row-major order holding it.
pub fn argmax_scan(values: &[f64], width: usize) -> (usize, usize) {
    let best = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let i = values.iter().position(|&v| v == best).unwrap();
    (i / width, i % width)
}

/// All injective partial maps from `n` left items into `m` right items.
pub fn assignments(n: usize, m: usize) -> Vec<Vec<Option<usize>>> {
    fn go(i: usize, n: usize, m: usize, used: &mut Vec<bool>, cur: &mut Vec<Option<usize>>, out: &mut Vec<Vec<Option<usize>>>) {
        if i == n {
            out.push(cur.clone());
            return;
        }
        cur.push(None);
        go(i + 1, n, m, used, cur, out);
        cur.pop();
        for j in 0..m {
            if !used[j] {
                used[j] = true;
                cur.push(Some(j));
                go(i + 1, n, m, used, cur, out);
                cur.pop();
                used[j] = false;
            }
        }
    }
    let mut out = Vec::new();
    go(0, n, m, &mut vec![false; m], &mut Vec::new(), &mut out);
    out
}

/// Best total weight over all assignments with edges allowed by `ok`.
pub fn best_assignment(weights: &[Vec<f64>], m: usize, ok: &dyn Fn(usize, usize) -> bool) -> (f64, usize) {
    let mut best = (0.0f64, 0usize);
    for a in assignments(weights.len(), m) {
        if a.iter().enumerate().any(|(i, j)| j.is_some_and(|j| !ok(i, j))) {
            continue;
        }
        let w: f64 = a.iter().enumerate().filter_map(|(i, j)| j.map(|j| weights[i][j])).sum();
        let c = a.iter().flatten().count();
        best.0 = best.0.max(w);
        best.1 = best.1.max(c);
    }
    best
}

/// Area under the precision envelope: each recall step is weighted by the best
/// precision reached at that recall or later.
pub fn ap_oracle(tp_after: &[usize], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let prec: Vec<f64> = tp_after.iter().enumerate().map(|(k, &t)| t as f64 / (k + 1) as f64).collect();
    let mut total = 0.0;
    let mut last = 0;
    for k in 0..tp_after.len() {
        if tp_after[k] != last {
            let best = prec[k..].iter().cloned().fold(0.0, f64::max);
            total += best * (tp_after[k] - last) as f64 / n_gt as f64;
            last = tp_after[k];
        }
    }
    total
}
