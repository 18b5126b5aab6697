//! Image and volume containers.
//!
//! Pixel data is stored planar: `data[c * h * w + y * w + x]`. A two-channel
//! grid is interpreted as one complex image (channel 0 real, channel 1
//! imaginary); a one-channel grid is real-valued.

use num_complex::Complex64;

use crate::error::MeasurementError;

/// A 2D grid with one or two real channels.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageGrid {
    /// All-zero grid. `channels` must be 1 or 2.
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        assert!(
            channels == 1 || channels == 2,
            "channel count must be 1 or 2, got {channels}"
        );
        ImageGrid {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    /// Wrap an existing planar buffer, validating shape and finiteness.
    pub fn from_data(
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<f64>,
    ) -> Result<Self, MeasurementError> {
        if channels != 1 && channels != 2 {
            return Err(MeasurementError::BadGrid(format!(
                "channel count must be 1 or 2, got {channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(MeasurementError::BadGrid(format!(
                "buffer length {} does not match {height}x{width}x{channels}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(MeasurementError::NonFinite("image data"));
        }
        Ok(ImageGrid {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// View a two-channel grid as complex samples in row-major order.
    pub fn to_complex(&self) -> Vec<Complex64> {
        assert_eq!(self.channels, 2, "complex view needs a two-channel grid");
        let plane = self.height * self.width;
        (0..plane)
            .map(|i| Complex64::new(self.data[i], self.data[plane + i]))
            .collect()
    }

    /// Rebuild a two-channel grid from complex samples.
    pub fn from_complex(height: usize, width: usize, values: &[Complex64]) -> Self {
        assert_eq!(values.len(), height * width);
        let plane = height * width;
        let mut data = vec![0.0; 2 * plane];
        for (i, v) in values.iter().enumerate() {
            data[i] = v.re;
            data[plane + i] = v.im;
        }
        ImageGrid {
            height,
            width,
            channels: 2,
            data,
        }
    }

    /// Per-pixel magnitude: identity for one channel, |re + i im| for two.
    pub fn magnitude(&self) -> ImageGrid {
        let plane = self.height * self.width;
        let data = match self.channels {
            1 => self.data.clone(),
            _ => (0..plane)
                .map(|i| self.data[i].hypot(self.data[plane + i]))
                .collect(),
        };
        ImageGrid {
            height: self.height,
            width: self.width,
            channels: 1,
            data,
        }
    }

    /// Squared Euclidean norm over all channels.
    pub fn energy(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn scaled(&self, factor: f64) -> ImageGrid {
        let mut out = self.clone();
        for v in out.data.iter_mut() {
            *v *= factor;
        }
        out
    }

    pub fn add_assign(&mut self, other: &ImageGrid) {
        assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
    }
}

/// A stack of identically shaped slices.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeGrid {
    slices: Vec<ImageGrid>,
}

impl VolumeGrid {
    pub fn new(slices: Vec<ImageGrid>) -> Result<Self, MeasurementError> {
        if slices.is_empty() {
            return Err(MeasurementError::BadGrid(
                "a volume needs at least one slice".into(),
            ));
        }
        let shape = slices[0].shape();
        if slices.iter().any(|s| s.shape() != shape) {
            return Err(MeasurementError::BadGrid(
                "volume slices must share height, width and channels".into(),
            ));
        }
        Ok(VolumeGrid { slices })
    }

    pub fn zeros(n_slice: usize, height: usize, width: usize, channels: usize) -> Self {
        VolumeGrid {
            slices: (0..n_slice)
                .map(|_| ImageGrid::zeros(height, width, channels))
                .collect(),
        }
    }

    pub fn n_slice(&self) -> usize {
        self.slices.len()
    }

    pub fn slice(&self, z: usize) -> &ImageGrid {
        &self.slices[z]
    }

    pub fn slice_mut(&mut self, z: usize) -> &mut ImageGrid {
        &mut self.slices[z]
    }

    pub fn slices(&self) -> &[ImageGrid] {
        &self.slices
    }

    pub fn slice_shape(&self) -> (usize, usize, usize) {
        self.slices[0].shape()
    }

    pub fn energy(&self) -> f64 {
        self.slices.iter().map(|s| s.energy()).sum()
    }
}

/// Either a single image or a multislice volume; what operators act on and
/// generators emit.
#[derive(Debug, Clone, PartialEq)]
pub enum Field {
    Image(ImageGrid),
    Volume(VolumeGrid),
}

impl Field {
    pub fn as_image(&self) -> Option<&ImageGrid> {
        match self {
            Field::Image(img) => Some(img),
            Field::Volume(_) => None,
        }
    }

    pub fn as_volume(&self) -> Option<&VolumeGrid> {
        match self {
            Field::Volume(v) => Some(v),
            Field::Image(_) => None,
        }
    }

    pub fn describe_shape(&self) -> String {
        match self {
            Field::Image(img) => {
                let (h, w, c) = img.shape();
                format!("image {h}x{w}x{c}")
            }
            Field::Volume(v) => {
                let (h, w, c) = v.slice_shape();
                format!("volume {}x{h}x{w}x{c}", v.n_slice())
            }
        }
    }

    pub fn energy(&self) -> f64 {
        match self {
            Field::Image(img) => img.energy(),
            Field::Volume(v) => v.energy(),
        }
    }

    pub fn add_assign(&mut self, other: &Field) {
        match (self, other) {
            (Field::Image(a), Field::Image(b)) => a.add_assign(b),
            (Field::Volume(a), Field::Volume(b)) => {
                assert_eq!(a.n_slice(), b.n_slice());
                for (sa, sb) in a.slices.iter_mut().zip(b.slices.iter()) {
                    sa.add_assign(sb);
                }
            }
            _ => panic!("cannot add an image to a volume"),
        }
    }

    /// Flatten to one real vector (slices, then channels, row-major).
    pub fn flattened(&self) -> Vec<f64> {
        match self {
            Field::Image(img) => img.data().to_vec(),
            Field::Volume(v) => {
                let mut out = Vec::new();
                for s in &v.slices {
                    out.extend_from_slice(s.data());
                }
                out
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn complex_round_trip() {
        let mut img = ImageGrid::zeros(2, 3, 2);
        img.set(0, 1, 2, 4.0);
        img.set(1, 0, 1, -2.5);
        let c = img.to_complex();
        let back = ImageGrid::from_complex(2, 3, &c);
        assert_eq!(img, back);
    }

    #[test]
    fn rejects_bad_channel_count() {
        assert!(ImageGrid::from_data(2, 2, 3, vec![0.0; 12]).is_err());
    }

    #[test]
    fn rejects_non_finite() {
        assert!(ImageGrid::from_data(1, 2, 1, vec![1.0, f64::NAN]).is_err());
    }

    #[test]
    fn volume_requires_matching_slices() {
        let a = ImageGrid::zeros(4, 4, 2);
        let b = ImageGrid::zeros(4, 5, 2);
        assert!(VolumeGrid::new(vec![a.clone(), b]).is_err());
        assert!(VolumeGrid::new(vec![a.clone(), a]).is_ok());
    }

    #[test]
    fn magnitude_of_two_channel() {
        let img = ImageGrid::from_data(1, 1, 2, vec![3.0, 4.0]).unwrap();
        assert_eq!(img.magnitude().data(), &[5.0]);
    }
}
