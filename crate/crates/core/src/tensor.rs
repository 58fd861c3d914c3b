use nalgebra::DMatrix;

/// Dense `paths × len × width` array of `f64`, stored path-major so that every
/// `(path, index)` row is a contiguous slice.
#[derive(Clone, Debug, PartialEq)]
pub struct PathTensor {
    paths: usize,
    len: usize,
    width: usize,
    data: Vec<f64>,
}

impl PathTensor {
    pub fn zeros(paths: usize, len: usize, width: usize) -> Self {
        Self {
            paths,
            len,
            width,
            data: vec![0.0; paths * len * width],
        }
    }

    pub fn from_vec(paths: usize, len: usize, width: usize, data: Vec<f64>) -> Option<Self> {
        (data.len() == paths * len * width).then_some(Self {
            paths,
            len,
            width,
            data,
        })
    }

    pub fn paths(&self) -> usize {
        self.paths
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn row(&self, path: usize, index: usize) -> &[f64] {
        let start = (path * self.len + index) * self.width;
        &self.data[start..start + self.width]
    }

    pub fn row_mut(&mut self, path: usize, index: usize) -> &mut [f64] {
        let start = (path * self.len + index) * self.width;
        &mut self.data[start..start + self.width]
    }

    /// All rows of one path, concatenated.
    pub fn path(&self, path: usize) -> &[f64] {
        let stride = self.len * self.width;
        &self.data[path * stride..(path + 1) * stride]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Entries at `index` for every path as a `paths × width` matrix.
    pub fn slice_at(&self, index: usize) -> DMatrix<f64> {
        DMatrix::from_fn(self.paths, self.width, |p, j| self.row(p, index)[j])
    }

    /// Inverse of [`PathTensor::slice_at`].
    pub fn set_slice_at(&mut self, index: usize, m: &DMatrix<f64>) {
        for p in 0..self.paths {
            let row = self.row_mut(p, index);
            for (j, v) in row.iter_mut().enumerate() {
                *v = m[(p, j)];
            }
        }
    }

    /// Mutable per-path chunks, for path-parallel fills.
    pub fn path_chunks_mut(&mut self) -> std::slice::ChunksMut<'_, f64> {
        let stride = (self.len * self.width).max(1);
        self.data.chunks_mut(stride)
    }
}
