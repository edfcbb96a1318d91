//! Raw NCHW kernels used by the graph. No allocation policy or shape
//! validation beyond debug asserts; callers validate.

use super::Scalar;

pub fn conv2d_out_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if kernel > padded || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

pub fn tconv2d_out_dim(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    output_padding: usize,
) -> Option<usize> {
    if stride == 0 || input == 0 || output_padding >= stride {
        return None;
    }
    ((input - 1) * stride + kernel + output_padding).checked_sub(2 * padding)
}

/// Geometry of one convolution: image `c x h x w`, kernel `k x k`, output
/// `oh x ow`. For a transposed convolution the roles are swapped: the
/// "image" is the transposed-conv output and `oh x ow` is its input.
#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.c * self.k * self.k
    }

    pub fn col_cols(&self) -> usize {
        self.oh * self.ow
    }
}

/// Unfolds one image (`c*h*w`) into a `(c*k*k) x (oh*ow)` column matrix.
pub fn im2col<T: Scalar>(img: &[T], g: &ConvGeom, cols: &mut [T]) {
    let n = g.col_cols();
    for c in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &img[(c * g.h + iy as usize) * g.w..][..g.w];
                    for (ox, out) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *out = if ix < 0 || ix >= g.w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds columns back into an image.
pub fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, img: &mut [T]) {
    let n = g.col_cols();
    for c in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut img[(c * g.h + iy as usize) * g.w..][..g.w];
                    let line = &src[oy * g.ow..(oy + 1) * g.ow];
                    for (ox, &v) in line.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

pub fn add_channel_bias<T: Scalar>(out: &mut [T], bias: &[T], plane: usize) {
    for (c, &b) in bias.iter().enumerate() {
        for v in &mut out[c * plane..(c + 1) * plane] {
            *v += b;
        }
    }
}

pub fn accumulate_channel_sums<T: Scalar>(grad: &[T], acc: &mut [T], plane: usize) {
    for (c, a) in acc.iter_mut().enumerate() {
        *a += grad[c * plane..(c + 1) * plane].iter().copied().sum::<T>();
    }
}
