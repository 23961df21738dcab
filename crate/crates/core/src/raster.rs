//! Dense row-major rasters and their little-endian on-disk encoding.

use std::io;
use std::path::Path;

/// Element types that have a fixed little-endian binary encoding.
pub trait LeScalar: Copy + Default {
    const SIZE: usize;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

macro_rules! le_scalar {
    ($($t:ty),*) => {$(
        impl LeScalar for $t {
            const SIZE: usize = std::mem::size_of::<$t>();
            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }
            fn read_le(bytes: &[u8]) -> Self {
                <$t>::from_le_bytes(bytes.try_into().expect("slice length matches scalar size"))
            }
        }
    )*};
}

le_scalar!(u8, u16, u32, u64, f32, f64);

pub fn encode_slice<T: LeScalar>(values: &[T], out: &mut Vec<u8>) {
    out.reserve(values.len() * T::SIZE);
    for &v in values {
        v.write_le(out);
    }
}

/// Decodes `bytes` as a packed array; `None` when the length is not a multiple of the element size.
pub fn decode_slice<T: LeScalar>(bytes: &[u8]) -> Option<Vec<T>> {
    if !bytes.len().is_multiple_of(T::SIZE) {
        return None;
    }
    Some(bytes.chunks_exact(T::SIZE).map(T::read_le).collect())
}

/// H×W×`channels` raster stored row-major with channels interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster<T> {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<T>,
}

impl<T: Copy + Default> Raster<T> {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, T::default())
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: T) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    /// `None` when `data` does not hold exactly `width * height * channels` elements.
    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<T>) -> Option<Self> {
        (data.len() == width * height * channels).then_some(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len_pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn same_dims<U>(&self, other: &Raster<U>) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    /// Channel values of pixel index `p` (row-major `y * width + x`).
    pub fn pixel(&self, p: usize) -> &[T] {
        &self.data[p * self.channels..(p + 1) * self.channels]
    }

    pub fn pixel_mut(&mut self, p: usize) -> &mut [T] {
        &mut self.data[p * self.channels..(p + 1) * self.channels]
    }

    pub fn get(&self, x: usize, y: usize) -> T {
        self.data[(y * self.width + x) * self.channels]
    }

    pub fn set(&mut self, x: usize, y: usize, v: T) {
        self.data[(y * self.width + x) * self.channels] = v;
    }
}

impl<T: LeScalar> Raster<T> {
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        encode_slice(&self.data, &mut out);
        out
    }

    pub fn write(&self, path: &Path) -> io::Result<()> {
        std::fs::write(path, self.to_le_bytes())
    }
}
