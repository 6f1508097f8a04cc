//! Bounds-checked wrapper over the `matrixmultiply` GEMM kernels.

use super::Scalar;

/// Shape and strides of a matrix stored in a flat slice.
#[derive(Debug, Clone, Copy)]
pub(crate) struct View {
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl View {
    pub fn row_major(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn extent(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            0
        } else {
            (self.rows - 1) * self.rs + (self.cols - 1) * self.cs + 1
        }
    }
}

/// `c = alpha * a * b + beta * c`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Scalar>(alpha: T, a: &[T], av: View, b: &[T], bv: View, beta: T, c: &mut [T], cv: View) {
    assert_eq!(av.cols, bv.rows, "inner dimensions");
    assert_eq!((cv.rows, cv.cols), (av.rows, bv.cols), "output dimensions");
    assert!(av.extent() <= a.len() && bv.extent() <= b.len() && cv.extent() <= c.len());
    if cv.rows == 0 || cv.cols == 0 {
        return;
    }
    // SAFETY: every index reachable through the views lies inside the
    // slices (checked above) and `c` does not alias `a` or `b`.
    unsafe {
        T::gemm_raw(
            av.rows,
            av.cols,
            bv.cols,
            alpha,
            a.as_ptr(),
            av.rs as isize,
            av.cs as isize,
            b.as_ptr(),
            bv.rs as isize,
            bv.cs as isize,
            beta,
            c.as_mut_ptr(),
            cv.rs as isize,
            cv.cs as isize,
        )
    }
}
