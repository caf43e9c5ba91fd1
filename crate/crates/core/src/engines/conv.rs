//! Same-padded 3x3x3 convolution kernels.
//!
//! Volumes are stored with a one-voxel zero halo, so that every kernel tap
//! is a constant shift of the flat index and each tap becomes one long
//! contiguous loop. Kernels may write garbage into halo voxels; callers
//! re-zero the halo with [`zero_halo`] before the buffer is read again.

/// Dimensions including the halo.
pub fn padded_dims(dims: [usize; 3]) -> [usize; 3] {
    dims.map(|n| n + 2)
}

pub fn padded_len(dims: [usize; 3]) -> usize {
    padded_dims(dims).iter().product()
}

/// Flat range `[first, last]` covering every interior voxel.
#[inline]
fn interior_range(dims: [usize; 3]) -> (usize, usize) {
    let [_, pw, pd] = padded_dims(dims);
    let [h, w, d] = dims;
    ((pw + 1) * pd + 1, (h * pw + w) * pd + d)
}

#[inline]
fn taps(dims: [usize; 3]) -> impl Iterator<Item = (usize, isize)> {
    let [_, pw, pd] = padded_dims(dims).map(|n| n as isize);
    (0..27).map(move |t| {
        let (a, b, c) = (t as isize / 9 - 1, (t as isize / 3) % 3 - 1, t as isize % 3 - 1);
        (t, (a * pw + b) * pd + c)
    })
}

pub fn pad(dims: [usize; 3], src: &[f64], dst: &mut [f64]) {
    let [h, w, d] = dims;
    let [_, pw, pd] = padded_dims(dims);
    for i in 0..h {
        for j in 0..w {
            let s = (i * w + j) * d;
            let o = ((i + 1) * pw + j + 1) * pd + 1;
            dst[o..o + d].copy_from_slice(&src[s..s + d]);
        }
    }
}

pub fn unpad(dims: [usize; 3], src: &[f64], dst: &mut [f64]) {
    let [h, w, d] = dims;
    let [_, pw, pd] = padded_dims(dims);
    for i in 0..h {
        for j in 0..w {
            let o = (i * w + j) * d;
            let s = ((i + 1) * pw + j + 1) * pd + 1;
            dst[o..o + d].copy_from_slice(&src[s..s + d]);
        }
    }
}

pub fn zero_halo(dims: [usize; 3], buf: &mut [f64]) {
    let [ph, pw, pd] = padded_dims(dims);
    let plane = pw * pd;
    buf[..plane].fill(0.0);
    buf[(ph - 1) * plane..ph * plane].fill(0.0);
    for i in 1..ph - 1 {
        let base = i * plane;
        buf[base..base + pd].fill(0.0);
        buf[base + (pw - 1) * pd..base + plane].fill(0.0);
        for j in 1..pw - 1 {
            let row = base + j * pd;
            buf[row] = 0.0;
            buf[row + pd - 1] = 0.0;
        }
    }
}

/// Applies `f` to every interior voxel and zeroes the halo.
pub fn map_interior(dims: [usize; 3], buf: &mut [f64], f: impl Fn(f64) -> f64) {
    zero_halo(dims, buf);
    let [h, w, d] = dims;
    let [_, pw, pd] = padded_dims(dims);
    for i in 0..h {
        for j in 0..w {
            let o = ((i + 1) * pw + j + 1) * pd + 1;
            buf[o..o + d].iter_mut().for_each(|v| *v = f(*v));
        }
    }
}

/// Output voxels per cache block; every tap sweeps a block before moving on.
const BLOCK: usize = 512;

#[inline]
fn blocks(dims: [usize; 3]) -> impl Iterator<Item = (usize, usize)> {
    let (first, last) = interior_range(dims);
    (first..=last).step_by(BLOCK).map(move |b| (b, (b + BLOCK).min(last + 1)))
}

/// The nine `(a, b)` rows of the kernel: flat offset of the centre tap and
/// the three weights along the last axis. All-zero rows are skipped.
fn rows(dims: [usize; 3], w: &[f64]) -> Vec<(isize, [f64; 3])> {
    let [_, pw, pd] = padded_dims(dims).map(|n| n as isize);
    (0..9)
        .map(|r| {
            let (a, b) = (r as isize / 3 - 1, r as isize % 3 - 1);
            ((a * pw + b) * pd, [w[3 * r], w[3 * r + 1], w[3 * r + 2]])
        })
        .filter(|(_, w)| w.iter().any(|&x| x != 0.0))
        .collect()
}

/// `out += w (*) inp` for one input/output channel pair. `inp` must have a
/// zero halo.
pub fn accumulate(dims: [usize; 3], w: &[f64], inp: &[f64], out: &mut [f64]) {
    let rows = rows(dims, w);
    for (b, e) in blocks(dims) {
        let dst = &mut out[b..e];
        for &(off, [w0, w1, w2]) in &rows {
            let s = (b as isize + off - 1) as usize;
            let src = &inp[s..s + (e - b) + 2];
            for (i, x) in dst.iter_mut().enumerate() {
                *x += w0 * src[i] + w1 * src[i + 1] + w2 * src[i + 2];
            }
        }
    }
}

/// Adjoint of [`accumulate`] with respect to the input:
/// `gin += w^T (*) gout`. `gout` must have a zero halo. Only interior
/// voxels of `gin` are meaningful afterwards.
pub fn accumulate_transpose(dims: [usize; 3], w: &[f64], gout: &[f64], gin: &mut [f64]) {
    let rows = rows(dims, w);
    for (b, e) in blocks(dims) {
        for &(off, [w0, w1, w2]) in &rows {
            let lo = (b as isize + off) as usize;
            let src = &gout[b - 1..e + 1];
            for (i, x) in gin[lo..lo + (e - b)].iter_mut().enumerate() {
                *x += w0 * src[i + 2] + w1 * src[i + 1] + w2 * src[i];
            }
        }
    }
}

/// Weight gradient for one channel pair:
/// `gw[t] += sum_p gout[p] * inp[p + tap_t]`. `gout` must have a zero halo.
pub fn weight_grad(dims: [usize; 3], inp: &[f64], gout: &[f64], gw: &mut [f64]) {
    let taps: Vec<(usize, isize)> = taps(dims).collect();
    // four independent lanes per tap so the reduction vectorizes without
    // reassociation
    let mut lanes = [[0.0f64; 4]; 27];
    let mut tail = [0.0f64; 27];
    for (b, e) in blocks(dims) {
        let g = &gout[b..e];
        for &(t, off) in &taps {
            let s = (b as isize + off) as usize;
            let x = &inp[s..s + g.len()];
            let acc = &mut lanes[t];
            let mut gc = g.chunks_exact(4);
            let mut xc = x.chunks_exact(4);
            for (gq, xq) in (&mut gc).zip(&mut xc) {
                for l in 0..4 {
                    acc[l] += gq[l] * xq[l];
                }
            }
            tail[t] += gc.remainder().iter().zip(xc.remainder()).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    for t in 0..27 {
        let l = lanes[t];
        gw[t] += (l[0] + l[1]) + (l[2] + l[3]) + tail[t];
    }
}
