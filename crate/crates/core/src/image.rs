//! Interleaved float images and the PPM (P6) / PFM codecs used on disk.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major, channel-interleaved image; row 0 is the top of the frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Image {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        (y * self.width + x) * self.channels
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = self.index(x, y);
        &self.data[i..i + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f64] {
        let i = self.index(x, y);
        let c = self.channels;
        &mut self.data[i..i + c]
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[self.index(x, y) + c]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    /// Quantises to 8 bits and back, matching what a PPM round trip yields.
    pub fn quantized_u8(&self) -> Image {
        Image {
            data: self.data.iter().map(|&v| to_u8(v) as f64 / 255.0).collect(),
            ..self.clone()
        }
    }

    /// Rounds every value to the nearest `f32`, matching a PFM round trip.
    pub fn quantized_f32(&self) -> Image {
        Image {
            data: self.data.iter().map(|&v| v as f32 as f64).collect(),
            ..self.clone()
        }
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_ppm(img: &Image) -> Vec<u8> {
    assert_eq!(img.channels, 3, "PPM needs 3 channels");
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.data.iter().map(|&v| to_u8(v)));
    out
}

fn header_tokens<R: BufRead>(reader: &mut R, count: usize) -> std::io::Result<Vec<String>> {
    let mut tokens = Vec::new();
    let mut line = String::new();
    while tokens.len() < count {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            break;
        }
        let content = line.split('#').next().unwrap_or("");
        tokens.extend(content.split_whitespace().map(str::to_owned));
    }
    Ok(tokens)
}

pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<Image> {
    let mut reader = BufReader::new(bytes);
    let tokens = header_tokens(&mut reader, 4).map_err(|e| Error::io(path, e))?;
    if tokens.len() < 4 || tokens[0] != "P6" {
        return Err(Error::format(path, "expected a binary P6 header"));
    }
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::format(path, format!("bad header field {s:?}")))
    };
    let (w, h, maxval) = (parse(&tokens[1])?, parse(&tokens[2])?, parse(&tokens[3])?);
    if maxval != 255 {
        return Err(Error::format(path, format!("unsupported maxval {maxval}")));
    }
    let mut raw = vec![0u8; w * h * 3];
    reader
        .read_exact(&mut raw)
        .map_err(|_| Error::format(path, "truncated pixel data"))?;
    Ok(Image {
        width: w,
        height: h,
        channels: 3,
        data: raw.iter().map(|&b| b as f64 / 255.0).collect(),
    })
}

/// Little-endian PFM (`scale = -1.0`). PFM stores rows bottom to top.
pub fn encode_pfm(img: &Image) -> Vec<u8> {
    let tag = match img.channels {
        1 => "Pf",
        3 => "PF",
        c => panic!("PFM supports 1 or 3 channels, got {c}"),
    };
    let mut out = format!("{tag}\n{} {}\n-1.0\n", img.width, img.height).into_bytes();
    for y in (0..img.height).rev() {
        for v in img.pixel_row(y) {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

impl Image {
    fn pixel_row(&self, y: usize) -> &[f64] {
        let n = self.width * self.channels;
        &self.data[y * n..(y + 1) * n]
    }
}

pub fn decode_pfm(bytes: &[u8], path: &Path) -> Result<Image> {
    let mut reader = BufReader::new(bytes);
    let tokens = header_tokens(&mut reader, 4).map_err(|e| Error::io(path, e))?;
    if tokens.len() < 4 {
        return Err(Error::format(path, "truncated PFM header"));
    }
    let channels = match tokens[0].as_str() {
        "Pf" => 1,
        "PF" => 3,
        t => return Err(Error::format(path, format!("unknown PFM tag {t:?}"))),
    };
    let w: usize = tokens[1]
        .parse()
        .map_err(|_| Error::format(path, "bad PFM width"))?;
    let h: usize = tokens[2]
        .parse()
        .map_err(|_| Error::format(path, "bad PFM height"))?;
    let scale: f64 = tokens[3]
        .parse()
        .map_err(|_| Error::format(path, "bad PFM scale"))?;
    let little = scale < 0.0;
    let mut raw = vec![0u8; w * h * channels * 4];
    reader
        .read_exact(&mut raw)
        .map_err(|_| Error::format(path, "truncated PFM data"))?;
    let mut img = Image::zeros(w, h, channels);
    let row = w * channels;
    for (i, chunk) in raw.chunks_exact(4).enumerate() {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little {
            f32::from_le_bytes(b)
        } else {
            f32::from_be_bytes(b)
        };
        let file_row = i / row;
        let y = h - 1 - file_row;
        img.data[y * row + i % row] = v as f64;
    }
    Ok(img)
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes, path)
}

pub fn read_pfm(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pfm(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient_image(w: usize, h: usize, c: usize) -> Image {
        let mut img = Image::zeros(w, h, c);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = (i % 251) as f64 / 250.0;
        }
        img
    }

    #[test]
    fn ppm_round_trip_is_u8_quantisation() {
        let img = gradient_image(5, 3, 3);
        let bytes = encode_ppm(&img);
        assert!(bytes.starts_with(b"P6\n5 3\n255\n"));
        let back = decode_ppm(&bytes, Path::new("x.ppm")).unwrap();
        assert_eq!(back, img.quantized_u8());
    }

    #[test]
    fn pfm_round_trip_is_f32_quantisation() {
        for c in [1, 3] {
            let mut img = gradient_image(4, 6, c);
            img.data[0] = -3.25e5;
            let bytes = encode_pfm(&img);
            let back = decode_pfm(&bytes, Path::new("x.pfm")).unwrap();
            assert_eq!(back, img.quantized_f32());
        }
    }

    #[test]
    fn pfm_header_and_bottom_up_rows() {
        let mut img = Image::zeros(2, 2, 1);
        img.data = vec![1.0, 2.0, 3.0, 4.0];
        let bytes = encode_pfm(&img);
        let header = b"Pf\n2 2\n-1.0\n";
        assert!(bytes.starts_with(header));
        let first = f32::from_le_bytes(bytes[header.len()..header.len() + 4].try_into().unwrap());
        assert_eq!(first, 3.0);
    }

    #[test]
    fn rejects_garbage() {
        assert!(decode_ppm(b"P3\n1 1\n255\n", Path::new("a")).is_err());
        assert!(decode_ppm(b"P6\n2 2\n255\n\x00", Path::new("a")).is_err());
        assert!(decode_pfm(b"PX\n1 1\n-1\n", Path::new("a")).is_err());
    }
}
