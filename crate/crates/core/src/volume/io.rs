//! Header + raw volume files.
//!
//! A volume is a pair `<name>.hdr` / `<name>.raw`. The header is UTF-8
//! `key=value` lines:
//!
//! ```text
//! NDims=3
//! DimSize=512 512 80
//! ElementSpacing=0.76 0.76 2.0
//! OriginZ=0.0
//! ElementType=INT16
//! ElementDataFile=case.raw
//! ```
//!
//! Voxels are little-endian, x-fastest then y then z. Four-dimensional
//! files (multi-channel patches) append the channel axis last.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{Geometry, Grid, Mask3D, Spacing, Volume3D};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementType {
    Int16,
    UInt8,
}

impl ElementType {
    pub fn as_str(&self) -> &'static str {
        match self {
            ElementType::Int16 => "INT16",
            ElementType::UInt8 => "UINT8",
        }
    }

    pub fn size(&self) -> usize {
        match self {
            ElementType::Int16 => 2,
            ElementType::UInt8 => 1,
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "INT16" => Ok(ElementType::Int16),
            "UINT8" => Ok(ElementType::UInt8),
            other => Err(Error::UnsupportedElementType(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Header {
    pub dim_size: Vec<usize>,
    pub spacing: Vec<f64>,
    pub origin_z: f64,
    pub element_type: ElementType,
    pub data_file: String,
}

impl Header {
    pub fn ndims(&self) -> usize {
        self.dim_size.len()
    }

    pub fn voxel_count(&self) -> usize {
        self.dim_size.iter().product()
    }

    pub fn render(&self) -> String {
        let join_usize = |v: &[usize]| {
            v.iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join(" ")
        };
        let join_f64 = |v: &[f64]| v.iter().map(|d| format!("{d:?}")).collect::<Vec<_>>().join(" ");
        let mut out = String::new();
        // Writing to a String cannot fail.
        let _ = writeln!(out, "NDims={}", self.ndims());
        let _ = writeln!(out, "DimSize={}", join_usize(&self.dim_size));
        let _ = writeln!(out, "ElementSpacing={}", join_f64(&self.spacing));
        let _ = writeln!(out, "OriginZ={:?}", self.origin_z);
        let _ = writeln!(out, "ElementType={}", self.element_type.as_str());
        let _ = writeln!(out, "ElementDataFile={}", self.data_file);
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut ndims = None;
        let mut dim_size = None;
        let mut spacing = None;
        let mut origin_z = None;
        let mut element_type = None;
        let mut data_file = None;

        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Header(format!("line {}: expected key=value, got {line:?}", lineno + 1))
            })?;
            let value = value.trim();
            match key.trim() {
                "NDims" => ndims = Some(parse_num::<usize>(value, "NDims")?),
                "DimSize" => dim_size = Some(parse_list::<usize>(value, "DimSize")?),
                "ElementSpacing" => spacing = Some(parse_list::<f64>(value, "ElementSpacing")?),
                "OriginZ" => origin_z = Some(parse_num::<f64>(value, "OriginZ")?),
                "ElementType" => element_type = Some(ElementType::parse(value)?),
                "ElementDataFile" => data_file = Some(value.to_string()),
                _ => {}
            }
        }

        let ndims = ndims.ok_or_else(|| Error::Header("missing NDims".into()))?;
        let dim_size: Vec<usize> = dim_size.ok_or_else(|| Error::Header("missing DimSize".into()))?;
        let spacing: Vec<f64> =
            spacing.ok_or_else(|| Error::Header("missing ElementSpacing".into()))?;
        let element_type =
            element_type.ok_or_else(|| Error::Header("missing ElementType".into()))?;
        let data_file = data_file.ok_or_else(|| Error::Header("missing ElementDataFile".into()))?;

        if dim_size.len() != ndims {
            return Err(Error::Header(format!(
                "NDims={ndims} but DimSize has {} entries",
                dim_size.len()
            )));
        }
        if spacing.len() < 3 || spacing.len() > ndims {
            return Err(Error::Header(format!(
                "ElementSpacing needs 3..={ndims} entries, got {}",
                spacing.len()
            )));
        }
        if dim_size.iter().any(|&d| d == 0) {
            return Err(Error::Header(format!("DimSize entries must be >= 1: {dim_size:?}")));
        }
        if data_file.is_empty() || data_file.contains('/') || data_file.contains('\\') {
            return Err(Error::Header(format!(
                "ElementDataFile must be a bare file name, got {data_file:?}"
            )));
        }

        Ok(Header {
            dim_size,
            spacing,
            origin_z: origin_z.unwrap_or(0.0),
            element_type,
            data_file,
        })
    }

    fn geometry(&self) -> Result<Geometry> {
        if self.ndims() != 3 {
            return Err(Error::Header(format!(
                "expected NDims=3 for a volume, got {}",
                self.ndims()
            )));
        }
        let spacing = Spacing::new(self.spacing[0], self.spacing[1], self.spacing[2])
            .map_err(|e| Error::Header(e.to_string()))?;
        Geometry::new(
            [self.dim_size[0], self.dim_size[1], self.dim_size[2]],
            spacing,
            self.origin_z,
        )
        .map_err(|e| Error::Header(e.to_string()))
    }
}

fn parse_num<T: std::str::FromStr>(s: &str, key: &str) -> Result<T> {
    s.parse::<T>()
        .map_err(|_| Error::Header(format!("{key}: cannot parse {s:?}")))
}

fn parse_list<T: std::str::FromStr>(s: &str, key: &str) -> Result<Vec<T>> {
    s.split_whitespace().map(|t| parse_num(t, key)).collect()
}

/// Header path for `path`, accepting either `name.hdr` or a bare `name`.
pub fn header_path(path: &Path) -> PathBuf {
    if path.extension().is_some_and(|e| e == "hdr") {
        path.to_path_buf()
    } else {
        let mut s = path.as_os_str().to_os_string();
        s.push(".hdr");
        PathBuf::from(s)
    }
}

fn raw_name(header: &Path) -> Result<String> {
    header
        .file_stem()
        .and_then(|s| s.to_str())
        .filter(|s| !s.is_empty())
        .map(|s| format!("{s}.raw"))
        .ok_or_else(|| {
            Error::io(
                header,
                std::io::Error::new(std::io::ErrorKind::InvalidInput, "empty or non-UTF-8 file name"),
            )
        })
}

/// Reads header and raw bytes, checking the byte count.
fn read_raw(path: &Path) -> Result<(Header, Vec<u8>)> {
    let hdr_path = header_path(path);
    let text = fs::read_to_string(&hdr_path).map_err(|e| Error::io(&hdr_path, e))?;
    let header = Header::parse(&text)?;
    let raw_path = hdr_path
        .parent()
        .unwrap_or_else(|| Path::new(""))
        .join(&header.data_file);
    let bytes = fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
    let elem = header.element_type.size();
    let expected = header.voxel_count();
    if bytes.len() != expected * elem {
        return Err(Error::DataLength {
            expected,
            found: bytes.len() / elem,
        });
    }
    Ok((header, bytes))
}

fn decode(header: &Header, bytes: &[u8]) -> Vec<f64> {
    match header.element_type {
        ElementType::Int16 => bytes
            .chunks_exact(2)
            .map(|c| f64::from(i16::from_le_bytes([c[0], c[1]])))
            .collect(),
        ElementType::UInt8 => bytes.iter().map(|&b| f64::from(b)).collect(),
    }
}

fn encode_i16(values: impl Iterator<Item = f64>, out: &mut Vec<u8>) -> Result<()> {
    for (index, value) in values.enumerate() {
        if value.fract() != 0.0 || !(f64::from(i16::MIN)..=f64::from(i16::MAX)).contains(&value) {
            return Err(Error::Unrepresentable {
                value,
                index,
                element_type: "INT16",
            });
        }
        out.extend_from_slice(&(value as i16).to_le_bytes());
    }
    Ok(())
}

fn write_pair(path: &Path, mut header: Header, bytes: &[u8]) -> Result<PathBuf> {
    if path.as_os_str().is_empty() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::InvalidInput, "empty output path"),
        ));
    }
    let hdr_path = header_path(path);
    header.data_file = raw_name(&hdr_path)?;
    let raw_path = hdr_path
        .parent()
        .unwrap_or_else(|| Path::new(""))
        .join(&header.data_file);
    fs::write(&raw_path, bytes).map_err(|e| Error::io(&raw_path, e))?;
    fs::write(&hdr_path, header.render()).map_err(|e| Error::io(&hdr_path, e))?;
    Ok(hdr_path)
}

/// Reads a 3D volume. `INT16` and `UINT8` files are both widened to `f64`.
pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume3D> {
    let (header, bytes) = read_raw(path.as_ref())?;
    let geometry = header.geometry()?;
    Grid::new(geometry, decode(&header, &bytes))
}

/// Writes `volume` as `INT16`. Every voxel must be an integer in the `i16` range.
pub fn write_volume(volume: &Volume3D, path: impl AsRef<Path>) -> Result<PathBuf> {
    let g = volume.geometry();
    let mut bytes = Vec::with_capacity(g.len() * 2);
    encode_i16(volume.data().iter().copied(), &mut bytes)?;
    let header = Header {
        dim_size: g.dims.to_vec(),
        spacing: g.spacing.as_array().to_vec(),
        origin_z: g.origin_z,
        element_type: ElementType::Int16,
        data_file: String::new(),
    };
    write_pair(path.as_ref(), header, &bytes)
}

/// Reads a `UINT8` mask, keeping raw labels.
pub fn read_mask(path: impl AsRef<Path>) -> Result<Mask3D> {
    let (header, bytes) = read_raw(path.as_ref())?;
    if header.element_type != ElementType::UInt8 {
        return Err(Error::UnsupportedElementType(format!(
            "{} (masks must be UINT8)",
            header.element_type.as_str()
        )));
    }
    let geometry = header.geometry()?;
    Grid::new(geometry, bytes)
}

pub fn write_mask(mask: &Mask3D, path: impl AsRef<Path>) -> Result<PathBuf> {
    let g = mask.geometry();
    let header = Header {
        dim_size: g.dims.to_vec(),
        spacing: g.spacing.as_array().to_vec(),
        origin_z: g.origin_z,
        element_type: ElementType::UInt8,
        data_file: String::new(),
    };
    write_pair(path.as_ref(), header, mask.data())
}

/// Writes equally-sized 3D channels as one 4D `INT16` file, channel axis last.
pub fn write_channels(
    channels: &[Vec<f64>],
    dims: [usize; 3],
    spacing: Spacing,
    origin_z: f64,
    path: impl AsRef<Path>,
) -> Result<PathBuf> {
    let n = dims.iter().product::<usize>();
    if let Some(bad) = channels.iter().find(|c| c.len() != n) {
        return Err(Error::DataLength {
            expected: n,
            found: bad.len(),
        });
    }
    let mut bytes = Vec::with_capacity(n * channels.len() * 2);
    encode_i16(channels.iter().flatten().copied(), &mut bytes)?;
    let header = Header {
        dim_size: vec![dims[0], dims[1], dims[2], channels.len()],
        spacing: vec![spacing.dx, spacing.dy, spacing.dz, 1.0],
        origin_z,
        element_type: ElementType::Int16,
        data_file: String::new(),
    };
    write_pair(path.as_ref(), header, &bytes)
}

/// Reads a 4D multi-channel file written by [`write_channels`].
pub fn read_channels(path: impl AsRef<Path>) -> Result<(Header, Vec<Vec<f64>>)> {
    let (header, bytes) = read_raw(path.as_ref())?;
    if header.ndims() != 4 {
        return Err(Error::Header(format!(
            "expected NDims=4 for a channel file, got {}",
            header.ndims()
        )));
    }
    let per_channel: usize = header.dim_size[..3].iter().product();
    let values = decode(&header, &bytes);
    let channels = values.chunks(per_channel).map(<[f64]>::to_vec).collect();
    Ok((header, channels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn geom(dims: [usize; 3], spacing: Spacing) -> Geometry {
        Geometry::new(dims, spacing, -12.5).unwrap()
    }

    #[test]
    fn reads_declared_size() {
        let dir = tempfile::tempdir().unwrap();
        let g = geom([4, 4, 2], Spacing::new(1.0, 1.0, 1.0).unwrap());
        let v = Volume3D::from_fn(g, |x, y, z| (x + y + z) as f64 - 3.0);
        write_volume(&v, dir.path().join("v.hdr")).unwrap();
        let back = read_volume(dir.path().join("v.hdr")).unwrap();
        assert_eq!(back.data().len(), 32);
        assert_eq!(back, v);
    }

    #[test]
    fn header_echoes_spacing() {
        let dir = tempfile::tempdir().unwrap();
        let g = geom([2, 2, 2], Spacing::RESAMPLED);
        let v = Volume3D::filled(g, -1024.0);
        let hdr = write_volume(&v, dir.path().join("s")).unwrap();
        assert_eq!(hdr.extension().unwrap(), "hdr");
        let text = fs::read_to_string(hdr).unwrap();
        assert!(text.contains("ElementSpacing=0.76 0.76 2.0\n"), "{text}");
        assert!(text.contains("ElementDataFile=s.raw\n"));
        assert!(text.contains("ElementType=INT16\n"));
    }

    #[test]
    fn short_raw_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let g = geom([4, 4, 2], Spacing::new(1.0, 1.0, 1.0).unwrap());
        write_volume(&Volume3D::filled(g, 1.0), dir.path().join("v.hdr")).unwrap();
        let raw = dir.path().join("v.raw");
        let bytes = fs::read(&raw).unwrap();
        fs::write(&raw, &bytes[..62]).unwrap();
        let err = read_volume(dir.path().join("v.hdr")).unwrap_err();
        assert!(err.to_string().contains("data length mismatch"), "{err}");
        assert!(matches!(err, Error::DataLength { expected: 32, found: 31 }));
    }

    #[test]
    fn malformed_and_unsupported_headers() {
        let dir = tempfile::tempdir().unwrap();
        let hdr = dir.path().join("bad.hdr");
        fs::write(&hdr, "NDims=3\nDimSize=2 2\nElementSpacing=1 1 1\nElementType=INT16\nElementDataFile=bad.raw\n").unwrap();
        assert!(matches!(read_volume(&hdr), Err(Error::Header(_))));

        fs::write(&hdr, "NDims=3\nDimSize=2 2 2\nElementSpacing=1 1 1\nElementType=FLOAT32\nElementDataFile=bad.raw\n").unwrap();
        assert!(matches!(read_volume(&hdr), Err(Error::UnsupportedElementType(_))));

        fs::write(&hdr, "garbage line\n").unwrap();
        assert!(matches!(read_volume(&hdr), Err(Error::Header(_))));
    }

    #[test]
    fn unwritable_destination() {
        let v = Volume3D::filled(geom([1, 1, 1], Spacing::RESAMPLED), 0.0);
        assert!(matches!(write_volume(&v, ""), Err(Error::Io { .. })));
        assert!(matches!(
            write_volume(&v, "/nonexistent-dir/x/v.hdr"),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn non_integer_hu_is_not_written() {
        let dir = tempfile::tempdir().unwrap();
        let v = Volume3D::filled(geom([1, 1, 1], Spacing::RESAMPLED), 0.5);
        assert!(matches!(
            write_volume(&v, dir.path().join("v")),
            Err(Error::Unrepresentable { .. })
        ));
    }

    #[test]
    fn channels_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let chans = vec![vec![1.0, 2.0], vec![-3.0, 4.0], vec![0.0, 1.0]];
        let p = write_channels(&chans, [2, 1, 1], Spacing::RESAMPLED, 0.0, dir.path().join("p")).unwrap();
        let (h, back) = read_channels(p).unwrap();
        assert_eq!(h.dim_size, vec![2, 1, 1, 3]);
        assert_eq!(back, chans);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn int16_roundtrip_is_bitwise(
            values in proptest::collection::vec(any::<i16>(), 24),
            dz in 0.1f64..10.0,
        ) {
            let dir = tempfile::tempdir().unwrap();
            let g = geom([2, 3, 4], Spacing::new(0.76, 0.5, dz).unwrap());
            let v = Volume3D::new(g, values.iter().map(|&x| f64::from(x)).collect()).unwrap();
            write_volume(&v, dir.path().join("v")).unwrap();
            let back = read_volume(dir.path().join("v.hdr")).unwrap();
            prop_assert_eq!(back.geometry(), v.geometry());
            prop_assert!(back.data().iter().zip(v.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }

        #[test]
        fn uint8_roundtrip_is_bitwise(values in proptest::collection::vec(any::<u8>(), 24)) {
            let dir = tempfile::tempdir().unwrap();
            let g = geom([4, 3, 2], Spacing::RESAMPLED);
            let m = Mask3D::new(g, values).unwrap();
            write_mask(&m, dir.path().join("m")).unwrap();
            prop_assert_eq!(read_mask(dir.path().join("m.hdr")).unwrap(), m);
        }
    }
}
