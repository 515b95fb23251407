//! Point cloud files.
//!
//! * `bin4`: little-endian `f32` quadruples `(x, y, z, intensity)`, the KITTI
//!   velodyne layout.
//! * `xyz-csv`: a `x,y,z` or `x,y,z,intensity` header followed by decimal rows.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geom::{Point, PointCloud};

const BIN4_RECORD: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CloudFormat {
    Bin4,
    XyzCsv,
}

impl CloudFormat {
    /// `.csv` selects CSV; anything else is treated as `bin4`.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => CloudFormat::XyzCsv,
            _ => CloudFormat::Bin4,
        }
    }
}

pub fn read_cloud(path: &Path) -> Result<PointCloud> {
    read_cloud_as(path, CloudFormat::from_path(path))
}

pub fn read_cloud_as(path: &Path, format: CloudFormat) -> Result<PointCloud> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    match format {
        CloudFormat::Bin4 => decode_bin4(path, &bytes),
        CloudFormat::XyzCsv => decode_csv(path, &bytes),
    }
}

pub fn write_cloud(cloud: &PointCloud, path: &Path) -> Result<()> {
    write_cloud_as(cloud, path, CloudFormat::from_path(path))
}

pub fn write_cloud_as(cloud: &PointCloud, path: &Path, format: CloudFormat) -> Result<()> {
    let bytes = match format {
        CloudFormat::Bin4 => encode_bin4(cloud),
        CloudFormat::XyzCsv => encode_csv(cloud),
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn encode_bin4(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(cloud.len() * BIN4_RECORD);
    for p in &cloud.points {
        for v in [p.x, p.y, p.z, p.intensity.unwrap_or(0.0)] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_bin4(path: &Path, bytes: &[u8]) -> Result<PointCloud> {
    if !bytes.len().is_multiple_of(BIN4_RECORD) {
        let whole = bytes.len() - bytes.len() % BIN4_RECORD;
        return Err(Error::Format {
            path: path.into(),
            offset: whole as u64,
            msg: format!(
                "{} trailing bytes; length {} is not a multiple of {BIN4_RECORD}",
                bytes.len() - whole,
                bytes.len()
            ),
        });
    }
    let mut points = Vec::with_capacity(bytes.len() / BIN4_RECORD);
    for (i, rec) in bytes.chunks_exact(BIN4_RECORD).enumerate() {
        let f = |j: usize| f32::from_le_bytes(rec[4 * j..4 * j + 4].try_into().unwrap()) as f64;
        let p = Point::new(f(0), f(1), f(2)).with_intensity(f(3));
        if !p.is_finite() {
            return Err(Error::Format {
                path: path.into(),
                offset: (i * BIN4_RECORD) as u64,
                msg: "non-finite coordinate".into(),
            });
        }
        points.push(p);
    }
    Ok(PointCloud::new(points))
}

fn encode_csv(cloud: &PointCloud) -> Vec<u8> {
    let with_intensity = cloud.points.iter().any(|p| p.intensity.is_some());
    let mut out = String::from(if with_intensity {
        "x,y,z,intensity\n"
    } else {
        "x,y,z\n"
    });
    for p in &cloud.points {
        if with_intensity {
            out.push_str(&format!(
                "{},{},{},{}\n",
                p.x,
                p.y,
                p.z,
                p.intensity.unwrap_or(0.0)
            ));
        } else {
            out.push_str(&format!("{},{},{}\n", p.x, p.y, p.z));
        }
    }
    out.into_bytes()
}

fn decode_csv(path: &Path, bytes: &[u8]) -> Result<PointCloud> {
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.into(),
        line,
        msg,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(bytes);
    let headers = reader
        .headers()
        .map_err(|e| parse_err(1, e.to_string()))?
        .clone();
    let names: Vec<&str> = headers.iter().collect();
    let with_intensity = match names.as_slice() {
        ["x", "y", "z"] => false,
        ["x", "y", "z", "intensity"] => true,
        [] => return Ok(PointCloud::default()),
        other => {
            return Err(parse_err(
                1,
                format!(
                    "expected header x,y,z[,intensity], found {}",
                    other.join(",")
                ),
            ))
        }
    };

    let mut points = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        let cell = |j: usize| -> Result<f64> {
            let raw = record.get(j).unwrap_or("");
            match raw.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(parse_err(
                    line,
                    format!("column {}: '{raw}' is not a finite number", j + 1),
                )),
            }
        };
        let mut p = Point::new(cell(0)?, cell(1)?, cell(2)?);
        p.intensity = Some(if with_intensity { cell(3)? } else { 0.0 });
        points.push(p);
    }
    Ok(PointCloud::new(points))
}
