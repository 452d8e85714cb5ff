//! Small convolutional backbone producing a P2-P5 feature pyramid.

use crate::error::{Error, Result};
use crate::layers::Builder;
use crate::tensor::{Graph, ParamId, Real, Tensor, Var};

/// Downsampling factor of P2, P3, P4, P5.
pub const STRIDES: [usize; 4] = [4, 8, 16, 32];
/// Pyramid z coordinate of each level, `log2(stride)`.
pub const LEVEL_Z: [f64; 4] = [2.0, 3.0, 4.0, 5.0];

/// RGB input `[3, H, W]` with values in `[0, 1]`, sides multiples of 32.
#[derive(Clone, Debug, PartialEq)]
pub struct Image<T: Real = f32> {
    tensor: Tensor<T>,
}

impl<T: Real> Image<T> {
    pub fn new(tensor: Tensor<T>) -> Result<Self> {
        let s = tensor.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::Input(format!("image must be [3, H, W], got {s:?}")));
        }
        let (h, w) = (s[1], s[2]);
        if h < 32 || w < 32 || h % 32 != 0 || w % 32 != 0 {
            return Err(Error::Input(format!(
                "image sides must be positive multiples of 32, got {h}x{w}"
            )));
        }
        Ok(Image { tensor })
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.tensor
    }

    pub fn cast<U: Real>(&self) -> Image<U> {
        Image {
            tensor: self.tensor.cast(),
        }
    }
}

/// Four feature maps `[c, H/s, W/s]` for `s` in [`STRIDES`], held on a graph.
#[derive(Clone, Copy, Debug)]
pub struct FeaturePyramid {
    pub levels: [Var; 4],
    /// `(height, width)` of each level.
    pub sizes: [(usize, usize); 4],
    pub channels: usize,
    /// Input image `(height, width)` in pixels.
    pub image_size: (usize, usize),
}

impl FeaturePyramid {
    /// Wraps existing maps, checking the halving contract between levels.
    pub fn from_levels<T: Real>(g: &Graph<'_, T>, levels: [Var; 4], image_size: (usize, usize)) -> Result<Self> {
        let c = g.shape(levels[0])[0];
        let mut sizes = [(0, 0); 4];
        for (j, &v) in levels.iter().enumerate() {
            let s = g.shape(v);
            if s.len() != 3 || s[0] != c {
                return Err(Error::Shape(format!("pyramid level {} has shape {s:?}", j + 2)));
            }
            sizes[j] = (s[1], s[2]);
            if j > 0 && (sizes[j - 1].0 != 2 * s[1] || sizes[j - 1].1 != 2 * s[2]) {
                return Err(Error::Shape(format!(
                    "pyramid level {} is {:?}, expected half of {:?}",
                    j + 2,
                    sizes[j],
                    sizes[j - 1]
                )));
            }
        }
        Ok(FeaturePyramid {
            levels,
            sizes,
            channels: c,
            image_size,
        })
    }
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    k: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
}

impl Conv {
    fn new<T: Real>(b: &mut Builder<'_, T>, name: &str, cin: usize, cout: usize, ksize: usize, stride: usize) -> Result<Self> {
        let mut s = b.scope(name);
        Ok(Conv {
            k: s.xavier("kernel", &[cout, cin, ksize, ksize])?,
            b: s.zeros("bias", &[cout, 1, 1])?,
            stride,
            pad: ksize / 2,
        })
    }

    fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let k = g.param(self.k);
        let b = g.param(self.b);
        let y = g.conv2d(x, k, self.stride, self.pad)?;
        g.add(y, b)
    }
}

/// Stem conv, one stride-2 conv per level and 1x1 laterals merged top-down.
#[derive(Clone, Debug)]
pub struct Backbone {
    stem: Conv,
    stages: [Conv; 4],
    laterals: [Conv; 4],
    pub channels: usize,
}

impl Backbone {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, width: usize, channels: usize) -> Result<Self> {
        let mut s = b.scope("backbone");
        let widths = [width, 2 * width, 2 * width, 2 * width];
        let stem = Conv::new(&mut s, "stem", 3, width, 3, 2)?;
        let mut cin = width;
        let mut stages = Vec::with_capacity(4);
        let mut laterals = Vec::with_capacity(4);
        for (j, &w) in widths.iter().enumerate() {
            stages.push(Conv::new(&mut s, &format!("stage{}", j + 2), cin, w, 3, 2)?);
            laterals.push(Conv::new(&mut s, &format!("lateral{}", j + 2), w, channels, 1, 1)?);
            cin = w;
        }
        Ok(Backbone {
            stem,
            stages: stages.try_into().expect("four stages"),
            laterals: laterals.try_into().expect("four laterals"),
            channels,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, image: &Image<T>) -> Result<FeaturePyramid> {
        let x = g.constant(image.tensor().clone());
        let x = g.scale(x, T::cast(2.0))?;
        let x = g.add_scalar(x, -T::one())?;
        let x = self.stem.forward(g, x)?;
        let mut x = g.relu(x)?;
        let mut lat = Vec::with_capacity(4);
        for (stage, lateral) in self.stages.iter().zip(&self.laterals) {
            let y = stage.forward(g, x)?;
            x = g.relu(y)?;
            lat.push(lateral.forward(g, x)?);
        }
        let mut levels = [lat[3]; 4];
        for j in (0..3).rev() {
            let up = g.upsample2x(levels[j + 1])?;
            levels[j] = g.add(lat[j], up)?;
        }
        FeaturePyramid::from_levels(g, levels, (image.height(), image.width()))
    }
}
