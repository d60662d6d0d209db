//! Dense C×H×W image tensors with intensities in `[0,1]`, plus the raw
//! feature-vector payload used by desk-scale synthetic datasets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A C×H×W array of intensities in `[0,1]`, stored row-major per channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageTensor {
    c: usize,
    h: usize,
    w: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(c: usize, h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != c * h * w {
            return Err(Error::ShapeMismatch(format!(
                "expected {}x{}x{} = {} values, got {}",
                c,
                h,
                w,
                c * h * w,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::InvalidArgument(
                "image intensities must lie in [0,1]".into(),
            ));
        }
        Ok(Self { c, h, w, data })
    }

    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.c, self.h, self.w)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.h + y) * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.h + y) * self.w + x] = v;
    }

    /// Bilinear resize to `out_h`×`out_w`. Identity when the size is unchanged.
    pub fn resize_bilinear(&self, out_h: usize, out_w: usize) -> Self {
        if out_h == self.h && out_w == self.w {
            return self.clone();
        }
        let mut out = ImageTensor::zeros(self.c, out_h, out_w);
        // align-corners-false convention: sample at pixel centers
        let sy = self.h as f32 / out_h as f32;
        let sx = self.w as f32 / out_w as f32;
        for c in 0..self.c {
            for oy in 0..out_h {
                let fy = ((oy as f32 + 0.5) * sy - 0.5).clamp(0.0, self.h as f32 - 1.0);
                let y0 = fy.floor() as usize;
                let y1 = (y0 + 1).min(self.h - 1);
                let wy = fy - y0 as f32;
                for ox in 0..out_w {
                    let fx = ((ox as f32 + 0.5) * sx - 0.5).clamp(0.0, self.w as f32 - 1.0);
                    let x0 = fx.floor() as usize;
                    let x1 = (x0 + 1).min(self.w - 1);
                    let wx = fx - x0 as f32;
                    let top = self.get(c, y0, x0) * (1.0 - wx) + self.get(c, y0, x1) * wx;
                    let bot = self.get(c, y1, x0) * (1.0 - wx) + self.get(c, y1, x1) * wx;
                    out.set(c, oy, ox, top * (1.0 - wy) + bot * wy);
                }
            }
        }
        out
    }

    pub fn hflip(&self) -> Self {
        let mut out = self.clone();
        for c in 0..self.c {
            for y in 0..self.h {
                for x in 0..self.w {
                    out.set(c, y, x, self.get(c, y, self.w - 1 - x));
                }
            }
        }
        out
    }

    pub fn vflip(&self) -> Self {
        let mut out = self.clone();
        for c in 0..self.c {
            for y in 0..self.h {
                for x in 0..self.w {
                    out.set(c, y, x, self.get(c, self.h - 1 - y, x));
                }
            }
        }
        out
    }

    /// Crop the region `(top, left, ch, cw)` and resize back to this image's size.
    pub fn crop_resize(&self, top: usize, left: usize, ch: usize, cw: usize) -> Result<Self> {
        if top + ch > self.h || left + cw > self.w || ch == 0 || cw == 0 {
            return Err(Error::InvalidArgument(format!(
                "crop ({top},{left},{ch},{cw}) outside {}x{} image",
                self.h, self.w
            )));
        }
        let mut patch = ImageTensor::zeros(self.c, ch, cw);
        for c in 0..self.c {
            for y in 0..ch {
                for x in 0..cw {
                    patch.set(c, y, x, self.get(c, top + y, left + x));
                }
            }
        }
        Ok(patch.resize_bilinear(self.h, self.w))
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            c: self.c,
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|v| f(*v)).collect(),
        }
    }

    pub fn clamp01(&self) -> Self {
        self.map(|v| v.clamp(0.0, 1.0))
    }
}

/// Example payload: an image tensor or a raw feature vector.
///
/// Raw features are not constrained to `[0,1]`; they come from synthetic
/// generators or precomputed embedding tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Payload {
    Image(ImageTensor),
    Features(Vec<f32>),
}

impl Payload {
    pub fn values(&self) -> &[f32] {
        match self {
            Payload::Image(t) => t.data(),
            Payload::Features(v) => v,
        }
    }

    pub fn len(&self) -> usize {
        self.values().len()
    }

    pub fn is_empty(&self) -> bool {
        self.values().is_empty()
    }

    /// Human-readable shape tag used in shape-mismatch errors.
    pub fn shape_desc(&self) -> String {
        match self {
            Payload::Image(t) => format!("image {}x{}x{}", t.channels(), t.height(), t.width()),
            Payload::Features(v) => format!("features[{}]", v.len()),
        }
    }

    pub fn same_shape(&self, other: &Payload) -> bool {
        match (self, other) {
            (Payload::Image(a), Payload::Image(b)) => a.shape() == b.shape(),
            (Payload::Features(a), Payload::Features(b)) => a.len() == b.len(),
            _ => false,
        }
    }

    /// Elementwise convex blend `lambda*self + (1-lambda)*other`.
    pub fn blend(&self, other: &Payload, lambda: f32) -> Result<Payload> {
        if !self.same_shape(other) {
            return Err(Error::ShapeMismatch(format!(
                "cannot blend {} with {}",
                self.shape_desc(),
                other.shape_desc()
            )));
        }
        let data: Vec<f32> = self
            .values()
            .iter()
            .zip(other.values())
            .map(|(a, b)| lambda * a + (1.0 - lambda) * b)
            .collect();
        Ok(match self {
            Payload::Image(t) => {
                let (c, h, w) = t.shape();
                Payload::Image(ImageTensor::new(c, h, w, data)?)
            }
            Payload::Features(_) => Payload::Features(data),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_out_of_range() {
        assert!(ImageTensor::new(1, 1, 2, vec![0.0, 1.5]).is_err());
        assert!(ImageTensor::new(1, 1, 2, vec![0.0, 1.0]).is_ok());
    }

    #[test]
    fn resize_identity_at_same_size() {
        let t = ImageTensor::new(1, 2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        assert_eq!(t.resize_bilinear(2, 2), t);
    }

    #[test]
    fn hflip_involution() {
        let t = ImageTensor::new(1, 2, 3, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        assert_eq!(t.hflip().hflip(), t);
        assert_eq!(t.vflip().vflip(), t);
    }

    #[test]
    fn blend_endpoints() {
        let a = Payload::Features(vec![0.2, 0.8]);
        let b = Payload::Features(vec![0.6, 0.0]);
        assert_eq!(a.blend(&b, 1.0).unwrap(), a);
        assert_eq!(a.blend(&b, 0.0).unwrap(), b);
        assert_eq!(
            a.blend(&b, 0.5).unwrap(),
            Payload::Features(vec![0.4, 0.4])
        );
    }

    #[test]
    fn blend_shape_mismatch() {
        let a = Payload::Features(vec![0.2, 0.8]);
        let b = Payload::Features(vec![0.6]);
        assert!(a.blend(&b, 0.5).is_err());
    }
}
