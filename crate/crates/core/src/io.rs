//! Float images (PFM) and texture CSV files.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fields::GridTexture;

/// Grayscale float image, row-major with row 0 at the top.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::LengthMismatch {
                left: data.len(),
                right: width * height,
            });
        }
        Ok(Self { width, height, data })
    }

    /// Texel values of a texture, flipped so that larger `y` is on top.
    pub fn from_texture(t: &GridTexture) -> Self {
        let (nx, ny) = t.resolution();
        let v = t.values();
        let data = (0..ny).rev().flat_map(|j| v[j * nx..(j + 1) * nx].iter().copied()).collect();
        Self {
            width: nx,
            height: ny,
            data,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Writes to a temporary sibling and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::Io(format!("not a file path: {}", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    let io = |e: std::io::Error| Error::Io(format!("{}: {e}", path.display()));
    {
        let mut f = fs::File::create(&tmp).map_err(io)?;
        f.write_all(bytes).map_err(io)?;
        f.sync_all().map_err(io)?;
    }
    fs::rename(&tmp, path).map_err(io)
}

/// PFM bytes: `Pf` header, negative scale for little-endian, rows bottom to top.
pub fn encode_pfm(img: &Image) -> Vec<u8> {
    let mut out = format!("Pf\n{} {}\n-1.0\n", img.width, img.height).into_bytes();
    out.reserve(img.data.len() * 4);
    for row in (0..img.height).rev() {
        for v in &img.data[row * img.width..(row + 1) * img.width] {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_pfm(bytes: &[u8]) -> Result<Image> {
    let parse = |m: &str| Error::Parse(format!("pfm: {m}"));
    let mut pos = 0;
    let mut token = || -> Result<String> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(parse("truncated header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "Pf" {
        return Err(parse("only grayscale Pf images are supported"));
    }
    let width: usize = token()?.parse().map_err(|_| parse("bad width"))?;
    let height: usize = token()?.parse().map_err(|_| parse("bad height"))?;
    let scale: f64 = token()?.parse().map_err(|_| parse("bad scale"))?;
    // Exactly one whitespace byte separates the header from the data.
    pos += 1;
    let need = width * height * 4;
    if bytes.len() < pos + need {
        return Err(parse("truncated data"));
    }
    let mut data = vec![0.0; width * height];
    for (k, c) in bytes[pos..pos + need].chunks_exact(4).enumerate() {
        let b = [c[0], c[1], c[2], c[3]];
        let v = if scale < 0.0 { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        let (row, col) = (height - 1 - k / width, k % width);
        data[row * width + col] = v as f64;
    }
    Image::new(width, height, data)
}

pub fn write_pfm(path: &Path, img: &Image) -> Result<()> {
    write_atomic(path, &encode_pfm(img))
}

pub fn read_pfm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    decode_pfm(&bytes)
}

/// Texture CSV: a header line `nx,ny,xmin,ymin,xmax,ymax`, its values, then
/// `ny` rows of `nx` values each (row `j` holds texels with index `j` in y).
pub fn encode_texture_csv(t: &GridTexture) -> String {
    let (nx, ny) = t.resolution();
    let (min, max) = t.extent();
    let mut s = format!("nx,ny,xmin,ymin,xmax,ymax\n{nx},{ny},{},{},{},{}\n", min[0], min[1], max[0], max[1]);
    for row in t.values().chunks(nx) {
        let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        s.push_str(&line.join(","));
        s.push('\n');
    }
    s
}

pub fn decode_texture_csv(text: &str) -> Result<GridTexture> {
    let parse = |m: String| Error::Parse(format!("texture csv: {m}"));
    let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
    let header = lines.next().ok_or_else(|| parse("empty file".into()))?;
    if !header.starts_with("nx") {
        return Err(parse(format!("expected header line, got {header:?}")));
    }
    let meta: Vec<&str> = lines
        .next()
        .ok_or_else(|| parse("missing size line".into()))?
        .split(',')
        .map(str::trim)
        .collect();
    if meta.len() != 6 {
        return Err(parse(format!("size line needs 6 fields, got {}", meta.len())));
    }
    let nx: usize = meta[0].parse().map_err(|_| parse(format!("bad nx {:?}", meta[0])))?;
    let ny: usize = meta[1].parse().map_err(|_| parse(format!("bad ny {:?}", meta[1])))?;
    let ext: Vec<f64> = meta[2..]
        .iter()
        .map(|v| v.parse().map_err(|_| parse(format!("bad extent value {v:?}"))))
        .collect::<Result<_>>()?;
    let mut values = Vec::with_capacity(nx * ny);
    for (j, line) in lines.enumerate() {
        let row: Vec<f64> = line
            .split(',')
            .map(|v| v.trim().parse().map_err(|_| parse(format!("row {j}: bad value {v:?}"))))
            .collect::<Result<_>>()?;
        if row.len() != nx {
            return Err(parse(format!("row {j} has {} values, expected {nx}", row.len())));
        }
        values.extend(row);
    }
    if values.len() != nx * ny {
        return Err(parse(format!("expected {ny} rows, got {}", values.len() / nx.max(1))));
    }
    GridTexture::new(nx, ny, [ext[0], ext[1]], [ext[2], ext[3]], values)
}

pub fn write_texture_csv(path: &Path, t: &GridTexture) -> Result<()> {
    write_atomic(path, encode_texture_csv(t).as_bytes())
}

pub fn read_texture_csv(path: &Path) -> Result<GridTexture> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    decode_texture_csv(&text)
}

/// CSV with a header row; values formatted in full precision.
pub fn encode_csv(header: &[&str], rows: &[Vec<f64>]) -> String {
    let mut s = header.join(",");
    s.push('\n');
    for r in rows {
        let line: Vec<String> = r.iter().map(|v| v.to_string()).collect();
        s.push_str(&line.join(","));
        s.push('\n');
    }
    s
}
