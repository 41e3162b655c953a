use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// Spatial feature grid `f(x) ∈ R^{H×W×D}`, stored cell-major (`D` contiguous values per cell).
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    depth: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, depth: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * depth {
            return Err(shape_err(format!(
                "feature map {height}x{width}x{depth} needs {} values, got {}",
                height * width * depth,
                data.len()
            )));
        }
        Ok(Self { height, width, depth, data })
    }

    /// From a channel-first `[D,H,W]` or `[1,D,H,W]` tensor.
    pub fn from_channels_first(t: &Tensor) -> Result<Self> {
        let (d, h, w) = match *t.shape() {
            [d, h, w] | [1, d, h, w] => (d, h, w),
            _ => return Err(shape_err(format!("expected [D,H,W] features, got {:?}", t.shape()))),
        };
        let mut data = vec![0.0; d * h * w];
        for c in 0..d {
            for i in 0..h * w {
                data[i * d + c] = t.data()[c * h * w + i];
            }
        }
        Self::new(h, w, d, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Feature vector at row-major cell index `i`.
    pub fn cell(&self, i: usize) -> &[f64] {
        &self.data[i * self.depth..(i + 1) * self.depth]
    }

    pub fn at(&self, h: usize, w: usize) -> &[f64] {
        self.cell(h * self.width + w)
    }

    /// `(h, w)` of a row-major cell index.
    pub fn coords(&self, i: usize) -> (usize, usize) {
        (i / self.width, i % self.width)
    }

    /// Mean feature vector over all cells.
    pub fn mean_vector(&self) -> Vec<f64> {
        let mut acc = vec![0.0; self.depth];
        for i in 0..self.cells() {
            acc.iter_mut().zip(self.cell(i)).for_each(|(a, v)| *a += v);
        }
        acc.iter_mut().for_each(|a| *a /= self.cells() as f64);
        acc
    }
}

/// Feature maps of a set of identified images, all with the same geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub ids: Vec<String>,
    pub maps: Vec<FeatureMap>,
}

impl FeatureSet {
    pub fn new(ids: Vec<String>, maps: Vec<FeatureMap>) -> Result<Self> {
        if ids.len() != maps.len() {
            return Err(shape_err(format!("{} ids for {} feature maps", ids.len(), maps.len())));
        }
        if let Some(first) = maps.first() {
            let geom = (first.height, first.width, first.depth);
            if maps.iter().any(|m| (m.height, m.width, m.depth) != geom) {
                return Err(shape_err("feature maps in a set must share H, W and D"));
            }
        }
        Ok(Self { ids, maps })
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn depth(&self) -> usize {
        self.maps.first().map_or(0, |m| m.depth)
    }

    pub fn cells_per_map(&self) -> usize {
        self.maps.first().map_or(0, |m| m.cells())
    }

    /// All cells of all maps as one `[N·H·W, D]` tensor, image-major.
    pub fn stacked(&self) -> Tensor {
        let data: Vec<f64> = self.maps.iter().flat_map(|m| m.data.iter().copied()).collect();
        Tensor::new([self.len() * self.cells_per_map(), self.depth()], data).expect("consistent feature set")
    }
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}
