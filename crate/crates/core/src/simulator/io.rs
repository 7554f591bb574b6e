//! Scene directories: `catalog.csv`, `image_<band>.meta.json` and
//! `image_<band>.pgm16` (binary P5, 16-bit big-endian).

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::Scene;
use crate::error::{Error, Result};
use crate::model::{GalaxyShape, ImageModel, SourceParams};

fn csv_err(e: csv::Error) -> Error {
    Error::Parse(e.to_string())
}

pub fn catalog_header(num_colors: usize) -> Vec<String> {
    let mut h: Vec<String> = ["is_star", "direction_0", "direction_1", "ref_flux"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    h.extend((0..num_colors).map(|i| format!("colors_{i}")));
    h.extend(
        ["profile_weight", "angle", "half_light_radius", "axis_ratio"]
            .iter()
            .map(|s| s.to_string()),
    );
    h
}

pub fn write_catalog<W: Write>(out: W, catalog: &[SourceParams], num_colors: usize) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(catalog_header(num_colors)).map_err(csv_err)?;
    for s in catalog {
        let mut rec = vec![
            s.is_star.to_string(),
            format!("{}", s.direction[0]),
            format!("{}", s.direction[1]),
            format!("{}", s.ref_flux),
        ];
        rec.extend(s.colors.iter().map(|c| format!("{c}")));
        rec.extend(
            [
                s.shape.profile_weight,
                s.shape.angle,
                s.shape.half_light_radius,
                s.shape.axis_ratio,
            ]
            .iter()
            .map(|v| format!("{v}")),
        );
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_catalog<R: Read>(input: R) -> Result<Vec<SourceParams>> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers().map_err(csv_err)?.clone();
    let num_colors = header.iter().filter(|h| h.starts_with("colors_")).count();
    if header.iter().collect::<Vec<_>>() != catalog_header(num_colors) {
        return Err(Error::Parse(format!("unexpected catalog header {header:?}")));
    }
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let num = |j: usize| -> Result<f64> {
            rec[j]
                .parse::<f64>()
                .map_err(|_| Error::Parse(format!("catalog row {}: bad number '{}'", i + 1, &rec[j])))
        };
        let is_star = rec[0]
            .parse::<bool>()
            .map_err(|_| Error::Parse(format!("catalog row {}: bad is_star '{}'", i + 1, &rec[0])))?;
        let colors = (0..num_colors).map(|k| num(4 + k)).collect::<Result<Vec<_>>>()?;
        let base = 4 + num_colors;
        out.push(SourceParams {
            is_star,
            direction: [num(1)?, num(2)?],
            ref_flux: num(3)?,
            colors,
            shape: GalaxyShape {
                profile_weight: num(base)?,
                angle: num(base + 1)?,
                half_light_radius: num(base + 2)?,
                axis_ratio: num(base + 3)?,
            },
        });
    }
    Ok(out)
}

pub fn write_pgm16<W: Write>(mut out: W, width: usize, height: usize, pixels: &[u32]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::InvalidParameter("pixel grid size".into()));
    }
    let mut buf = format!("P5\n{width} {height}\n65535\n").into_bytes();
    buf.reserve(2 * pixels.len());
    for &p in pixels {
        let v = u16::try_from(p).map_err(|_| Error::Render(format!("count {p} exceeds the 16-bit range")))?;
        buf.extend_from_slice(&v.to_be_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

/// Reads a 16-bit P5 image, returning `(width, height, pixels)`.
pub fn read_pgm16<R: Read>(mut input: R) -> Result<(usize, usize, Vec<u32>)> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Parse("truncated pgm header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    if fields[0] != "P5" {
        return Err(Error::Parse(format!("not a binary pgm: magic {}", fields[0])));
    }
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Parse(format!("bad pgm field '{s}'")))
    };
    let (width, height, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval != 65535 {
        return Err(Error::Parse(format!("expected maxval 65535, found {maxval}")));
    }
    let raster = bytes.get(pos..).unwrap_or(&[]);
    if raster.len() != 2 * width * height {
        return Err(Error::Parse(format!(
            "pgm raster has {} bytes, expected {}",
            raster.len(),
            2 * width * height
        )));
    }
    let pixels = raster
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]) as u32)
        .collect();
    Ok((width, height, pixels))
}

impl Scene {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let num_colors = self
            .images
            .len()
            .checked_sub(1)
            .or_else(|| self.catalog.first().map(|s| s.colors.len()))
            .unwrap_or(0);
        write_catalog(fs::File::create(dir.join("catalog.csv"))?, &self.catalog, num_colors)?;
        for img in &self.images {
            let meta = serde_json::to_string_pretty(img)?;
            fs::write(dir.join(format!("image_{}.meta.json", img.band)), meta)?;
            if let Some(px) = &img.pixels {
                let f = fs::File::create(dir.join(format!("image_{}.pgm16", img.band)))?;
                write_pgm16(std::io::BufWriter::new(f), img.width, img.height, px)?;
            }
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let catalog = read_catalog(fs::File::open(dir.join("catalog.csv"))?)?;
        let mut images = Vec::new();
        for band in 0.. {
            let meta = dir.join(format!("image_{band}.meta.json"));
            if !meta.exists() {
                break;
            }
            let mut img: ImageModel = serde_json::from_str(&fs::read_to_string(meta)?)?;
            let pgm = dir.join(format!("image_{band}.pgm16"));
            if pgm.exists() {
                let (w, h, px) = read_pgm16(fs::File::open(pgm)?)?;
                if w != img.width || h != img.height {
                    return Err(Error::Parse(format!("image {band}: pgm size disagrees with metadata")));
                }
                img.pixels = Some(px);
            }
            img.validate()?;
            images.push(img);
        }
        Ok(Self { catalog, images })
    }
}
