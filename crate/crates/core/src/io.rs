//! Cloud and trunk file formats.
//!
//! CSV columns are `x,y,z[,tree_id,class,source_id]` with an optional header
//! row; class is encoded as {0=ground, 1=leafy, 2=woody, 255=unknown} and an
//! empty field means "absent". The binary format is a headerless sequence of
//! packed little-endian records `<f64 x, f64 y, f64 z, i32 tree_id, u8 class,
//! i32 source_id>` (33 bytes). Absent integers are stored as `i32::MIN` and an
//! absent class as 254.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::Point3;
use serde::{Deserialize, Serialize};

use crate::cloud::{MatterClass, PointCloud, PointRecord};
use crate::error::{Error, Result};
use crate::graph::TrunkPoint;

pub const BINARY_RECORD_LEN: usize = 33;
const ABSENT_INT: i32 = i32::MIN;
const ABSENT_CLASS: u8 = 254;
const CLOUD_HEADER: &str = "x,y,z,tree_id,class,source_id";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CloudFormat {
    #[default]
    Csv,
    Binary,
}

impl CloudFormat {
    /// `.bin` selects the binary format, anything else CSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("bin") => CloudFormat::Binary,
            _ => CloudFormat::Csv,
        }
    }
}

pub fn read_cloud(path: impl AsRef<Path>, format: CloudFormat) -> Result<PointCloud> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::with_capacity(1 << 20, file);
    match format {
        CloudFormat::Csv => read_csv(path, reader),
        CloudFormat::Binary => read_binary(path, reader),
    }
}

pub fn write_cloud(cloud: &PointCloud, path: impl AsRef<Path>, format: CloudFormat) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::with_capacity(1 << 20, file);
    let res = match format {
        CloudFormat::Csv => write_csv(cloud, &mut w),
        CloudFormat::Binary => write_binary(cloud, &mut w),
    };
    res.and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

fn parse_err(path: &Path, line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn read_csv<R: BufRead>(path: &Path, reader: R) -> Result<PointCloud> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut points = Vec::new();
    let mut record = csv::StringRecord::new();
    let mut first = true;
    loop {
        let more = rdr.read_record(&mut record).map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            parse_err(path, line, e.to_string())
        })?;
        if !more {
            break;
        }
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        if first {
            first = false;
            if record.get(0).is_some_and(|f| f.parse::<f64>().is_err()) {
                continue;
            }
        }
        let point = parse_csv_record(&record).map_err(|m| parse_err(path, line, m))?;
        point.check().map_err(|m| parse_err(path, line, m))?;
        points.push(point);
    }
    PointCloud::new(points)
}

fn parse_csv_record(rec: &csv::StringRecord) -> std::result::Result<PointRecord, String> {
    if rec.len() < 3 || rec.len() > 6 {
        return Err(format!("expected 3 to 6 columns, found {}", rec.len()));
    }
    let coord = |i: usize, name: &str| -> std::result::Result<f64, String> {
        rec[i]
            .parse::<f64>()
            .map_err(|_| format!("cannot parse {name} from {:?}", &rec[i]))
    };
    let optional_int = |i: usize, name: &str| -> std::result::Result<Option<i32>, String> {
        match rec.get(i) {
            None | Some("") => Ok(None),
            Some(s) => s
                .parse::<i32>()
                .map(Some)
                .map_err(|_| format!("cannot parse {name} from {s:?}")),
        }
    };
    let mut p = PointRecord::new(coord(0, "x")?, coord(1, "y")?, coord(2, "z")?);
    p.tree_id = optional_int(3, "tree_id")?;
    p.matter_class = match rec.get(4) {
        None | Some("") => None,
        Some(s) => {
            let code = s
                .parse::<u8>()
                .map_err(|_| format!("cannot parse class from {s:?}"))?;
            Some(MatterClass::from_code(code).ok_or_else(|| format!("unknown class code {code}"))?)
        }
    };
    p.source_id = optional_int(5, "source_id")?;
    Ok(p)
}

fn write_csv<W: Write>(cloud: &PointCloud, w: &mut W) -> std::io::Result<()> {
    writeln!(w, "{CLOUD_HEADER}")?;
    for p in cloud.points() {
        // `{}` on f64 prints the shortest string that parses back to the same bits.
        write!(w, "{},{},{},", p.x, p.y, p.z)?;
        if let Some(id) = p.tree_id {
            write!(w, "{id}")?;
        }
        w.write_all(b",")?;
        if let Some(c) = p.matter_class {
            write!(w, "{}", c.code())?;
        }
        w.write_all(b",")?;
        if let Some(s) = p.source_id {
            write!(w, "{s}")?;
        }
        w.write_all(b"\n")?;
    }
    Ok(())
}

fn read_binary<R: Read>(path: &Path, mut reader: R) -> Result<PointCloud> {
    let mut points = Vec::new();
    let mut buf = [0u8; BINARY_RECORD_LEN];
    let mut index: u64 = 0;
    loop {
        let mut filled = 0;
        while filled < BINARY_RECORD_LEN {
            let n = reader
                .read(&mut buf[filled..])
                .map_err(|e| Error::io(path, e))?;
            if n == 0 {
                break;
            }
            filled += n;
        }
        if filled == 0 {
            break;
        }
        index += 1;
        if filled < BINARY_RECORD_LEN {
            return Err(parse_err(
                path,
                index,
                format!("truncated record ({filled} of {BINARY_RECORD_LEN} bytes)"),
            ));
        }
        let f = |o: usize| f64::from_le_bytes(buf[o..o + 8].try_into().unwrap());
        let i = |o: usize| i32::from_le_bytes(buf[o..o + 4].try_into().unwrap());
        let opt = |v: i32| (v != ABSENT_INT).then_some(v);
        let mut p = PointRecord::new(f(0), f(8), f(16));
        p.tree_id = opt(i(24));
        p.matter_class = match buf[28] {
            ABSENT_CLASS => None,
            code => Some(
                MatterClass::from_code(code)
                    .ok_or_else(|| parse_err(path, index, format!("unknown class code {code}")))?,
            ),
        };
        p.source_id = opt(i(29));
        p.check().map_err(|m| parse_err(path, index, m))?;
        points.push(p);
    }
    PointCloud::new(points)
}

fn write_binary<W: Write>(cloud: &PointCloud, w: &mut W) -> std::io::Result<()> {
    let mut buf = [0u8; BINARY_RECORD_LEN];
    for p in cloud.points() {
        buf[0..8].copy_from_slice(&p.x.to_le_bytes());
        buf[8..16].copy_from_slice(&p.y.to_le_bytes());
        buf[16..24].copy_from_slice(&p.z.to_le_bytes());
        buf[24..28].copy_from_slice(&p.tree_id.unwrap_or(ABSENT_INT).to_le_bytes());
        buf[28] = p.matter_class.map_or(ABSENT_CLASS, MatterClass::code);
        buf[29..33].copy_from_slice(&p.source_id.unwrap_or(ABSENT_INT).to_le_bytes());
        w.write_all(&buf)?;
    }
    Ok(())
}

/// Reads a trunk list: CSV `x,y,z,tree_id` with optional header.
pub fn read_trunks(path: impl AsRef<Path>) -> Result<Vec<TrunkPoint>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(BufReader::new(file));
    let mut trunks = Vec::new();
    let mut first = true;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            parse_err(path, line, e.to_string())
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.len() == 1 && rec[0].is_empty() {
            continue;
        }
        if std::mem::take(&mut first) && rec[0].parse::<f64>().is_err() {
            continue;
        }
        if rec.len() != 4 {
            return Err(parse_err(path, line, format!("expected 4 columns, found {}", rec.len())));
        }
        let num = |i: usize| {
            rec[i]
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| parse_err(path, line, format!("bad coordinate {:?}", &rec[i])))
        };
        let tree_id = rec[3]
            .parse::<i32>()
            .map_err(|_| parse_err(path, line, format!("bad tree_id {:?}", &rec[3])))?;
        trunks.push(TrunkPoint {
            position: Point3::new(num(0)?, num(1)?, num(2)?),
            tree_id,
        });
    }
    Ok(trunks)
}

pub fn write_trunks(trunks: &[TrunkPoint], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let res = (|| {
        writeln!(w, "x,y,z,tree_id")?;
        for t in trunks {
            writeln!(
                w,
                "{},{},{},{}",
                t.position.x, t.position.y, t.position.z, t.tree_id
            )?;
        }
        w.flush()
    })();
    res.map_err(|e| Error::io(path, e))
}
