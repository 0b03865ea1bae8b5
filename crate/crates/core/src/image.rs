use crate::error::{Error, Result};

/// Channel-planar image patch with values nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

/// `(channels, height, width)` of a patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Geometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Geometry {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Geometry {
            channels,
            height,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl std::fmt::Display for Geometry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

impl Patch {
    pub fn new(geometry: Geometry, data: Vec<f32>) -> Result<Self> {
        if geometry.is_empty() {
            return Err(Error::shape(format!("degenerate patch geometry {geometry}")));
        }
        if data.len() != geometry.len() {
            return Err(Error::shape(format!(
                "patch {geometry} needs {} values, got {}",
                geometry.len(),
                data.len()
            )));
        }
        Ok(Patch {
            channels: geometry.channels,
            height: geometry.height,
            width: geometry.width,
            data,
        })
    }

    pub fn filled(geometry: Geometry, value: f32) -> Self {
        Patch {
            channels: geometry.channels,
            height: geometry.height,
            width: geometry.width,
            data: vec![value; geometry.len()],
        }
    }

    pub fn geometry(&self) -> Geometry {
        Geometry::new(self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn clip_unit(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    pub fn mse(&self, other: &Patch) -> f64 {
        debug_assert_eq!(self.geometry(), other.geometry());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| {
                let d = a as f64 - b as f64;
                d * d
            })
            .sum::<f64>()
            / self.data.len() as f64
    }

    /// Spatial crop of every channel.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Patch> {
        if top + height > self.height || left + width > self.width || height == 0 || width == 0 {
            return Err(Error::shape(format!(
                "crop {height}x{width} at ({top},{left}) exceeds {}",
                self.geometry()
            )));
        }
        let mut data = Vec::with_capacity(self.channels * height * width);
        for c in 0..self.channels {
            let plane = self.plane(c);
            for y in top..top + height {
                data.extend_from_slice(&plane[y * self.width + left..][..width]);
            }
        }
        Patch::new(Geometry::new(self.channels, height, width), data)
    }

    /// Stacks same-sized patches along the channel axis.
    pub fn stack(parts: &[&Patch]) -> Result<Patch> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("cannot stack zero patches"))?;
        let mut data = Vec::with_capacity(first.data.len() * parts.len());
        let mut channels = 0;
        for p in parts {
            if (p.height, p.width) != (first.height, first.width) {
                return Err(Error::shape(format!(
                    "cannot stack {} with {}",
                    p.geometry(),
                    first.geometry()
                )));
            }
            channels += p.channels;
            data.extend_from_slice(&p.data);
        }
        Patch::new(Geometry::new(channels, first.height, first.width), data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crop_and_stack() {
        let g = Geometry::new(1, 3, 3);
        let p = Patch::new(g, (0..9).map(|v| v as f32).collect()).unwrap();
        let c = p.crop(1, 1, 2, 2).unwrap();
        assert_eq!(c.data(), &[4.0, 5.0, 7.0, 8.0]);
        assert!(p.crop(2, 2, 2, 2).is_err());
        let s = Patch::stack(&[&c, &c]).unwrap();
        assert_eq!(s.geometry(), Geometry::new(2, 2, 2));
    }

    #[test]
    fn rejects_bad_sizes() {
        assert!(Patch::new(Geometry::new(1, 2, 2), vec![0.0; 3]).is_err());
        assert!(Patch::new(Geometry::new(1, 0, 2), vec![]).is_err());
    }
}
