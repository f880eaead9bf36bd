use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

/// Flat NCHW source index of every token feature in window layout
/// `(N·(H/M)·(W/M), M², C)`; windows and tokens are row-major.
fn partition_index(n: usize, c: usize, h: usize, w: usize, m: usize) -> Vec<usize> {
    let (wh, ww) = (h / m, w / m);
    let mut index = Vec::with_capacity(n * c * h * w);
    for b in 0..n {
        for wy in 0..wh {
            for wx in 0..ww {
                for ty in 0..m {
                    for tx in 0..m {
                        let (y, x) = (wy * m + ty, wx * m + tx);
                        index.extend((0..c).map(|ch| ((b * c + ch) * h + y) * w + x));
                    }
                }
            }
        }
    }
    index
}

fn check(op: &'static str, h: usize, w: usize, m: usize) -> Result<()> {
    if m == 0 || !h.is_multiple_of(m) || !w.is_multiple_of(m) {
        return Err(Error::invalid(
            op,
            format!("{h}×{w} map is not divisible into {m}×{m} windows"),
        ));
    }
    Ok(())
}

/// `(N, C, H, W)` → `(N·(H/M)·(W/M), M², C)`.
pub fn window_partition(tape: &mut Tape, x: Var, m: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 4 {
        return Err(Error::invalid(
            "window_partition",
            format!("expected NCHW input, got {s:?}"),
        ));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    check("window_partition", h, w, m)?;
    let index = partition_index(n, c, h, w, m);
    tape.gather(x, &[n * (h / m) * (w / m), m * m, c], index)
}

/// Inverse of [`window_partition`] for a map of `(n, h, w)` extents.
pub fn window_merge(tape: &mut Tape, tokens: Var, n: usize, h: usize, w: usize) -> Result<Var> {
    let s = tape.shape(tokens).to_vec();
    if s.len() != 3 {
        return Err(Error::invalid(
            "window_merge",
            format!("expected token layout, got {s:?}"),
        ));
    }
    let m = (s[1] as f64).sqrt().round() as usize;
    if m * m != s[1] {
        return Err(Error::invalid(
            "window_merge",
            format!("{} tokens per window is not a square", s[1]),
        ));
    }
    check("window_merge", h, w, m)?;
    let c = s[2];
    if s[0] != n * (h / m) * (w / m) {
        return Err(Error::shape("window_merge", &s, &[n, c, h, w]));
    }
    let forward = partition_index(n, c, h, w, m);
    let mut inverse = vec![0; forward.len()];
    for (dst, &src) in forward.iter().enumerate() {
        inverse[src] = dst;
    }
    tape.gather(tokens, &[n, c, h, w], inverse)
}
