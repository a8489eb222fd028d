/// Row-major dense matrix; rows index the batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Mat {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Mat {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Mat { rows, cols, data }
    }

    pub fn row_vector(data: Vec<f64>) -> Mat {
        let cols = data.len();
        Mat::from_vec(1, cols, data)
    }

    pub fn scalar(v: f64) -> Mat {
        Mat::from_vec(1, 1, vec![v])
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Mat {
        let cols = rows.first().map(Vec::len).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Mat::from_vec(rows.len(), cols, data)
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn same_shape(&self, other: &Mat) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat::from_vec(self.rows, self.cols, self.data.iter().map(|v| f(*v)).collect())
    }

    pub fn zip_map(&self, other: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
        debug_assert!(self.same_shape(other));
        Mat::from_vec(
            self.rows,
            self.cols,
            self.data.iter().zip(&other.data).map(|(a, b)| f(*a, *b)).collect(),
        )
    }

    pub fn add_assign(&mut self, other: &Mat) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|r| self.row(r).to_vec()).collect()
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` with optional transposes.
fn gemm(a: &Mat, ta: bool, b: &Mat, tb: bool, c: &mut Mat, beta: f64) {
    let (m, k) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (kb, n) = if tb { (b.cols, b.rows) } else { (b.rows, b.cols) };
    assert_eq!(k, kb, "inner dimensions");
    assert!(c.rows == m && c.cols == n, "output shape");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.data.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    if thin_gemm(a, ta, b, tb, c, beta, m, k, n) {
        return;
    }
    let (rsa, csa) = if ta { (1, a.cols as isize) } else { (a.cols as isize, 1) };
    let (rsb, csb) = if tb { (1, b.cols as isize) } else { (b.cols as isize, 1) };
    // SAFETY: strides and extents describe exactly the buffers of `a`, `b`
    // and `c`, whose lengths were checked against their shapes above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.data.as_mut_ptr(),
            c.cols as isize,
            1,
        );
    }
}

/// Row count below which streaming loops beat packed gemm: packing a large
/// weight for a handful of rows costs more than the product itself.
const THIN: usize = 4;

#[allow(clippy::too_many_arguments)]
fn thin_gemm(a: &Mat, ta: bool, b: &Mat, tb: bool, c: &mut Mat, beta: f64, m: usize, k: usize, n: usize) -> bool {
    let scale = |row: &mut [f64]| {
        if beta == 0.0 {
            row.fill(0.0);
        } else if beta != 1.0 {
            row.iter_mut().for_each(|v| *v *= beta);
        }
    };
    match (ta, tb) {
        // c[i,:] += a[i,p] * b[p,:], each weight row read once
        (false, false) if m <= THIN => {
            for i in 0..m {
                scale(&mut c.data[i * n..(i + 1) * n]);
            }
            for p in 0..k {
                let brow = &b.data[p * n..(p + 1) * n];
                for i in 0..m {
                    let av = a.data[i * k + p];
                    if av != 0.0 {
                        axpy(&mut c.data[i * n..(i + 1) * n], av, brow);
                    }
                }
            }
            true
        }
        // c[i,j] += a[i,:] . b[j,:], each weight row read once
        (false, true) if m <= THIN => {
            for i in 0..m {
                scale(&mut c.data[i * n..(i + 1) * n]);
            }
            for j in 0..n {
                let brow = &b.data[j * k..(j + 1) * k];
                for i in 0..m {
                    c.data[i * n + j] += dot(&a.data[i * k..(i + 1) * k], brow);
                }
            }
            true
        }
        // c[p,:] += a[i,p] * b[i,:] over the few rows i
        (true, false) if k <= THIN => {
            for p in 0..m {
                let crow = &mut c.data[p * n..(p + 1) * n];
                scale(crow);
                for i in 0..k {
                    let av = a.data[i * m + p];
                    if av != 0.0 {
                        axpy(crow, av, &b.data[i * n..(i + 1) * n]);
                    }
                }
            }
            true
        }
        _ => false,
    }
}

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (y, x) in y.iter_mut().zip(x) {
        *y += a * x;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    // four accumulators so the reduction vectorizes
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    acc[0] + acc[1] + acc[2] + acc[3] + tail
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let mut c = Mat::zeros(a.rows, b.cols);
    gemm(a, false, b, false, &mut c, 0.0);
    c
}

/// `a^T * b`
pub fn matmul_tn(a: &Mat, b: &Mat) -> Mat {
    let mut c = Mat::zeros(a.cols, b.cols);
    gemm(a, true, b, false, &mut c, 0.0);
    c
}

/// `c += a^T * b`
pub fn matmul_tn_acc(a: &Mat, b: &Mat, c: &mut Mat) {
    gemm(a, true, b, false, c, 1.0);
}

/// `a * b^T`
pub fn matmul_nt(a: &Mat, b: &Mat) -> Mat {
    let mut c = Mat::zeros(a.rows, b.rows);
    gemm(a, false, b, true, &mut c, 0.0);
    c
}
