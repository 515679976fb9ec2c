//! ASCII XYZ and ASCII PLY point-cloud files.
//!
//! XYZ: one point per line, `x y z [label]`, whitespace separated, `#`
//! starts a comment. PLY: the ASCII subset with a `vertex` element carrying
//! `x y z` and optionally `nx ny nz` and an integer `label`; other properties
//! and elements are skipped.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CloudFormat {
    Xyz,
    Ply,
}

impl CloudFormat {
    /// Guesses from the file extension; anything but `.ply` reads as XYZ.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("ply") => CloudFormat::Ply,
            _ => CloudFormat::Xyz,
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            CloudFormat::Xyz => "xyz",
            CloudFormat::Ply => "ply",
        }
    }
}

impl FromStr for CloudFormat {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "xyz" => Ok(CloudFormat::Xyz),
            "ply" => Ok(CloudFormat::Ply),
            other => Err(format!("unknown cloud format `{other}` (expected xyz or ply)")),
        }
    }
}

pub fn load_cloud<T: Real>(path: impl AsRef<Path>, format: CloudFormat) -> Result<PointCloud<T>> {
    let reader = BufReader::new(File::open(path)?);
    match format {
        CloudFormat::Xyz => read_xyz(reader),
        CloudFormat::Ply => read_ply(reader),
    }
}

pub fn save_cloud<T: Real>(cloud: &PointCloud<T>, path: impl AsRef<Path>, format: CloudFormat) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    match format {
        CloudFormat::Xyz => write_xyz(cloud, &mut w)?,
        CloudFormat::Ply => write_ply(cloud, &mut w)?,
    }
    w.flush()?;
    Ok(())
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

fn parse_coord<T: Real>(tok: &str, line: usize) -> Result<T> {
    let v: f64 = tok
        .parse()
        .map_err(|_| parse_err(line, format!("`{tok}` is not a number")))?;
    if !v.is_finite() {
        return Err(parse_err(line, format!("non-finite value `{tok}`")));
    }
    T::from_f64(v).filter(|x| x.is_finite()).ok_or_else(|| parse_err(line, format!("`{tok}` out of range")))
}

fn parse_label(tok: &str, line: usize) -> Result<i64> {
    tok.parse()
        .map_err(|_| parse_err(line, format!("label `{tok}` is not an integer")))
}

pub fn read_xyz<T: Real, R: BufRead>(reader: R) -> Result<PointCloud<T>> {
    let mut points = Vec::new();
    let mut labels = Vec::new();
    let mut has_labels: Option<bool> = None;
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line?;
        let data = line.split('#').next().unwrap_or("").trim();
        if data.is_empty() {
            continue;
        }
        let toks: Vec<&str> = data.split_whitespace().collect();
        let labelled = match toks.len() {
            3 => false,
            4 => true,
            n => return Err(parse_err(lineno, format!("expected 3 or 4 columns, found {n}"))),
        };
        if *has_labels.get_or_insert(labelled) != labelled {
            return Err(parse_err(lineno, "inconsistent label column"));
        }
        points.push(Vec3::new(
            parse_coord(toks[0], lineno)?,
            parse_coord(toks[1], lineno)?,
            parse_coord(toks[2], lineno)?,
        ));
        if labelled {
            labels.push(parse_label(toks[3], lineno)?);
        }
    }
    let cloud = PointCloud::new(points)?;
    if has_labels == Some(true) {
        cloud.with_labels(labels)
    } else {
        Ok(cloud)
    }
}

pub fn write_xyz<T: Real, W: Write>(cloud: &PointCloud<T>, w: &mut W) -> Result<()> {
    let labels = cloud.labels();
    let mut line = String::new();
    for (i, p) in cloud.points().iter().enumerate() {
        line.clear();
        // Display on floats is shortest-round-trip decimal, never exponent form.
        let _ = write!(line, "{} {} {}", p.x, p.y, p.z);
        if let Some(l) = labels {
            let _ = write!(line, " {}", l[i]);
        }
        line.push('\n');
        w.write_all(line.as_bytes())?;
    }
    Ok(())
}

struct PlyElement {
    name: String,
    count: usize,
    properties: Vec<String>,
    has_list: bool,
}

pub fn read_ply<T: Real, R: BufRead>(reader: R) -> Result<PointCloud<T>> {
    let mut lines = reader.lines().enumerate().map(|(i, l)| (i + 1, l));
    let mut next_line = |what: &str| -> Result<(usize, String)> {
        match lines.next() {
            Some((n, Ok(l))) => Ok((n, l)),
            Some((_, Err(e))) => Err(e.into()),
            None => Err(parse_err(0, format!("unexpected end of file while reading {what}"))),
        }
    };

    let (n, magic) = next_line("header")?;
    if magic.trim() != "ply" {
        return Err(parse_err(n, "missing `ply` magic"));
    }
    let mut elements: Vec<PlyElement> = Vec::new();
    let mut saw_format = false;
    loop {
        let (n, line) = next_line("header")?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            [] => continue,
            ["format", "ascii", "1.0"] => saw_format = true,
            ["format", other, ..] => return Err(parse_err(n, format!("unsupported format `{other}`"))),
            ["comment", ..] | ["obj_info", ..] => {}
            ["element", name, count] => {
                let count = count
                    .parse()
                    .map_err(|_| parse_err(n, format!("bad element count `{count}`")))?;
                elements.push(PlyElement {
                    name: name.to_string(),
                    count,
                    properties: Vec::new(),
                    has_list: false,
                });
            }
            ["property", "list", ..] => {
                let el = elements.last_mut().ok_or_else(|| parse_err(n, "property before element"))?;
                el.has_list = true;
            }
            ["property", _ty, name] => {
                let el = elements.last_mut().ok_or_else(|| parse_err(n, "property before element"))?;
                el.properties.push(name.to_string());
            }
            ["end_header"] => break,
            _ => return Err(parse_err(n, format!("unrecognized header line `{}`", line.trim()))),
        }
    }
    if !saw_format {
        return Err(parse_err(0, "missing `format ascii 1.0` line"));
    }
    let vertex_pos = elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or_else(|| parse_err(0, "no vertex element"))?;
    let vertex = &elements[vertex_pos];
    if vertex.has_list {
        return Err(parse_err(0, "list properties on vertex are not supported"));
    }
    let find = |name: &str| vertex.properties.iter().position(|p| p == name);
    let (ix, iy, iz) = match (find("x"), find("y"), find("z")) {
        (Some(x), Some(y), Some(z)) => (x, y, z),
        _ => return Err(parse_err(0, "vertex element lacks x/y/z properties")),
    };
    let normal_idx = match (find("nx"), find("ny"), find("nz")) {
        (Some(a), Some(b), Some(c)) => Some((a, b, c)),
        _ => None,
    };
    let label_idx = find("label");

    let mut points = Vec::with_capacity(vertex.count);
    let mut normals = Vec::new();
    let mut labels = Vec::new();
    for (ei, el) in elements.iter().enumerate() {
        let mut read = 0;
        while read < el.count {
            let (n, line) = next_line(&format!("{} element ({} of {} read)", el.name, read, el.count))
                .map_err(|e| match e {
                    Error::Parse { .. } => parse_err(
                        0,
                        format!("element `{}` declares {} entries but the body holds {}", el.name, el.count, read),
                    ),
                    other => other,
                })?;
            let toks: Vec<&str> = line.split_whitespace().collect();
            if toks.is_empty() {
                continue;
            }
            read += 1;
            if ei != vertex_pos {
                continue;
            }
            if toks.len() != el.properties.len() {
                return Err(parse_err(
                    n,
                    format!("expected {} values, found {}", el.properties.len(), toks.len()),
                ));
            }
            points.push(Vec3::new(
                parse_coord(toks[ix], n)?,
                parse_coord(toks[iy], n)?,
                parse_coord(toks[iz], n)?,
            ));
            if let Some((a, b, c)) = normal_idx {
                let v: Vec3<T> = Vec3::new(parse_coord(toks[a], n)?, parse_coord(toks[b], n)?, parse_coord(toks[c], n)?);
                normals.push(v.try_normalize());
            }
            if let Some(li) = label_idx {
                let tok = toks[li];
                let label = match tok.parse::<i64>() {
                    Ok(l) => l,
                    Err(_) => {
                        let f: f64 = tok.parse().map_err(|_| parse_err(n, format!("bad label `{tok}`")))?;
                        f as i64
                    }
                };
                labels.push(label);
            }
        }
    }
    for (n, line) in lines {
        if !line?.trim().is_empty() {
            return Err(parse_err(n, "data beyond the declared element counts"));
        }
    }

    let mut cloud = PointCloud::new(points)?;
    if normal_idx.is_some() {
        cloud = cloud.with_normals(normals)?;
    }
    if label_idx.is_some() {
        cloud = cloud.with_labels(labels)?;
    }
    Ok(cloud)
}

pub fn write_ply<T: Real, W: Write>(cloud: &PointCloud<T>, w: &mut W) -> Result<()> {
    let mut header = String::new();
    header.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(header, "element vertex {}", cloud.len());
    header.push_str("property float x\nproperty float y\nproperty float z\n");
    if cloud.normals().is_some() {
        header.push_str("property float nx\nproperty float ny\nproperty float nz\n");
    }
    if cloud.labels().is_some() {
        header.push_str("property int label\n");
    }
    header.push_str("end_header\n");
    w.write_all(header.as_bytes())?;

    let mut line = String::new();
    for (i, p) in cloud.points().iter().enumerate() {
        line.clear();
        let _ = write!(line, "{} {} {}", p.x, p.y, p.z);
        if let Some(ns) = cloud.normals() {
            let n = ns[i].unwrap_or_else(Vec3::zero);
            let _ = write!(line, " {} {} {}", n.x, n.y, n.z);
        }
        if let Some(ls) = cloud.labels() {
            let _ = write!(line, " {}", ls[i]);
        }
        line.push('\n');
        w.write_all(line.as_bytes())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    #[test]
    fn reads_three_point_xyz() {
        let src = "# header\n0 0 0\n1.5 2 3 # trailing\n\n-1 -2 -3\n";
        let c: PointCloud<f64> = read_xyz(Cursor::new(src)).unwrap();
        assert_eq!(c.len(), 3);
        assert_eq!(c.point(1), Vec3::new(1.5, 2.0, 3.0));
        assert!(c.labels().is_none());
    }

    #[test]
    fn xyz_labels_round_trip() {
        let src = "0 0 0 4\n1 1 1 -1\n";
        let c: PointCloud<f64> = read_xyz(Cursor::new(src)).unwrap();
        assert_eq!(c.labels().unwrap(), &[4, -1]);
        let mut out = Vec::new();
        write_xyz(&c, &mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), src);
    }

    #[test]
    fn xyz_errors_carry_line_numbers() {
        let err = read_xyz::<f64, _>(Cursor::new("0 0 0\n1 nan 2\n")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        let err = read_xyz::<f64, _>(Cursor::new("0 0 0\n1 2\n")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        let err = read_xyz::<f64, _>(Cursor::new("0 0 0\n1 2 3 7\n")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        let err = read_xyz::<f64, _>(Cursor::new("0 0 inf\n")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn ply_with_extra_properties_and_faces() {
        let src = "ply\nformat ascii 1.0\ncomment test\nelement vertex 2\nproperty float x\nproperty float y\nproperty uchar red\nproperty float z\nelement face 1\nproperty list uchar int vertex_indices\nend_header\n1 2 255 3\n4 5 0 6\n3 0 1 1\n";
        let c: PointCloud<f64> = read_ply(Cursor::new(src)).unwrap();
        assert_eq!(c.points(), &[Vec3::new(1.0, 2.0, 3.0), Vec3::new(4.0, 5.0, 6.0)]);
    }

    #[test]
    fn ply_count_mismatch_is_an_error() {
        let short = "ply\nformat ascii 1.0\nelement vertex 3\nproperty float x\nproperty float y\nproperty float z\nend_header\n0 0 0\n1 1 1\n";
        assert!(matches!(read_ply::<f64, _>(Cursor::new(short)), Err(Error::Parse { .. })));
        let long = "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\nend_header\n0 0 0\n1 1 1\n";
        assert!(matches!(read_ply::<f64, _>(Cursor::new(long)), Err(Error::Parse { line: 9, .. })));
    }

    #[test]
    fn ply_rejects_binary_and_bad_magic() {
        let bin = "ply\nformat binary_little_endian 1.0\nend_header\n";
        assert!(matches!(read_ply::<f64, _>(Cursor::new(bin)), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(read_ply::<f64, _>(Cursor::new("plx\n")), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn ply_round_trip_with_normals_and_labels() {
        let c = PointCloud::new(vec![Vec3::new(0.1, 0.2, 0.3), Vec3::new(-1.0, 0.0, 2.0)])
            .unwrap()
            .with_normals(vec![Some(Vec3::unit_z()), None])
            .unwrap()
            .with_labels(vec![2, -1])
            .unwrap();
        let mut out = Vec::new();
        write_ply(&c, &mut out).unwrap();
        let back: PointCloud<f64> = read_ply(Cursor::new(out)).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn format_parsing() {
        assert_eq!("PLY".parse::<CloudFormat>().unwrap(), CloudFormat::Ply);
        assert!("pcd".parse::<CloudFormat>().is_err());
        assert_eq!(CloudFormat::from_path(Path::new("a/b.ply")), CloudFormat::Ply);
    }
}
