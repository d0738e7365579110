use crate::tensor::Tensor;

/// Per-position L2 norm over channels of batch item 0.
pub fn channel_norms(map: &Tensor) -> Vec<f64> {
    let s = map.shape();
    let plane = s.plane();
    let d = map.data();
    (0..plane)
        .map(|p| (0..s.c).map(|c| (d[c * plane + p] as f64).powi(2)).sum::<f64>().sqrt())
        .collect()
}

/// Channel mean of batch item 0.
pub fn channel_mean(map: &Tensor) -> Vec<f64> {
    let s = map.shape();
    let plane = s.plane();
    let d = map.data();
    (0..plane)
        .map(|p| (0..s.c).map(|c| d[c * plane + p] as f64).sum::<f64>() / s.c as f64)
        .collect()
}

/// Mean over positions of the per-position channel norm.
pub fn mean_norm(map: &Tensor) -> f64 {
    let n = channel_norms(map);
    n.iter().sum::<f64>() / n.len() as f64
}

/// Spatial standard deviation of the channel-norm map over `mean + 1e-8`.
/// Zero for a perfectly uniform response.
pub fn spatial_invariance_score(map: &Tensor) -> f64 {
    let n = channel_norms(map);
    let len = n.len() as f64;
    let mean = n.iter().sum::<f64>() / len;
    let var = n.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / len;
    var.sqrt() / (mean + 1e-8)
}

/// Fraction of the channel-mean map's spectral energy that sits in the
/// period-2 bins `(pi, 0)`, `(0, pi)` and `(pi, pi)`.
///
/// A pure +-1 checkerboard scores 1 and a constant map scores 0. Returns
/// `None` when either side is shorter than 4.
pub fn checkerboard_score(map: &Tensor) -> Option<f64> {
    let s = map.shape();
    if s.h < 4 || s.w < 4 {
        return None;
    }
    let m = channel_mean(map);
    let total: f64 = m.iter().map(|v| v * v).sum();
    if total == 0.0 {
        return Some(0.0);
    }
    let (mut xr, mut yr, mut xy) = (0.0, 0.0, 0.0);
    for y in 0..s.h {
        for x in 0..s.w {
            let v = m[y * s.w + x];
            let (sx, sy) = (sign(x), sign(y));
            xr += sx * v;
            yr += sy * v;
            xy += sx * sy * v;
        }
    }
    // Parseval: sum_k |X_k|^2 = HW * sum m^2.
    Some((xr * xr + yr * yr + xy * xy) / (s.plane() as f64 * total))
}

fn sign(i: usize) -> f64 {
    if i % 2 == 0 {
        1.0
    } else {
        -1.0
    }
}

/// Channel mean, box-averaged down to at most `max_w` columns.
pub fn thumbnail(map: &Tensor, max_w: usize) -> Tensor {
    let s = map.shape();
    let m = channel_mean(map);
    let f = s.w.div_ceil(max_w.max(1)).max(1);
    let (th, tw) = (s.h.div_ceil(f), s.w.div_ceil(f));
    Tensor::from_fn(crate::tensor::Shape::new(1, 1, th, tw), |_, _, ty, tx| {
        let (mut acc, mut cnt) = (0.0, 0usize);
        for y in ty * f..((ty + 1) * f).min(s.h) {
            for x in tx * f..((tx + 1) * f).min(s.w) {
                acc += m[y * s.w + x];
                cnt += 1;
            }
        }
        (acc / cnt as f64) as f32
    })
}
