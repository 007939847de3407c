//! Output files: legacy ASCII VTK fields, iteration histories and campaign
//! summaries. Every file is written to a temporary sibling and renamed into
//! place.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::config::format_f64;
use crate::deflation::DeflationResult;
use crate::error::{Error, Result};
use crate::mesh::TriMesh;
use crate::optimizer::IterationRecord;

/// Writes `contents` to a temporary file next to `path`, then renames it.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("{} has no file name", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(contents)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

/// Named nodal and elementwise arrays for one VTK file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FieldSet {
    pub point: Vec<(String, Vec<f64>)>,
    pub cell: Vec<(String, Vec<f64>)>,
}

impl FieldSet {
    pub fn with_point(mut self, name: &str, values: Vec<f64>) -> Self {
        self.point.push((name.to_string(), values));
        self
    }

    pub fn with_cell(mut self, name: &str, values: Vec<f64>) -> Self {
        self.cell.push((name.to_string(), values));
        self
    }

    pub fn cell_array(&self, name: &str) -> Option<&[f64]> {
        self.cell
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
    }

    pub fn point_array(&self, name: &str) -> Option<&[f64]> {
        self.point
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
    }
}

/// Legacy ASCII unstructured grid text.
pub fn field_vtk_text(mesh: &TriMesh, fields: &FieldSet) -> Result<String> {
    let (nv, nt) = (mesh.n_vertices(), mesh.n_triangles());
    for (name, v) in &fields.point {
        if v.len() != nv {
            return Err(Error::MeshMismatch(format!(
                "point array `{name}` has {} values for {nv} vertices",
                v.len()
            )));
        }
    }
    for (name, v) in &fields.cell {
        if v.len() != nt {
            return Err(Error::MeshMismatch(format!(
                "cell array `{name}` has {} values for {nt} triangles",
                v.len()
            )));
        }
    }
    let mut s = String::new();
    s.push_str("# vtk DataFile Version 3.0\ntopoflow fields\nASCII\nDATASET UNSTRUCTURED_GRID\n");
    let _ = writeln!(s, "POINTS {nv} double");
    for p in mesh.vertices() {
        let _ = writeln!(
            s,
            "{} {} {}",
            format_f64(p[0]),
            format_f64(p[1]),
            format_f64(0.0)
        );
    }
    let _ = writeln!(s, "CELLS {nt} {}", 4 * nt);
    for t in mesh.triangles() {
        let _ = writeln!(s, "3 {} {} {}", t[0], t[1], t[2]);
    }
    let _ = writeln!(s, "CELL_TYPES {nt}");
    for _ in 0..nt {
        s.push_str("5\n");
    }
    let section = |s: &mut String, header: &str, arrays: &[(String, Vec<f64>)]| {
        if arrays.is_empty() {
            return;
        }
        s.push_str(header);
        for (name, values) in arrays {
            let _ = writeln!(s, "SCALARS {name} double 1\nLOOKUP_TABLE default");
            for v in values {
                s.push_str(&format_f64(*v));
                s.push('\n');
            }
        }
    };
    section(&mut s, &format!("POINT_DATA {nv}\n"), &fields.point);
    section(&mut s, &format!("CELL_DATA {nt}\n"), &fields.cell);
    Ok(s)
}

pub fn write_field_vtk(mesh: &TriMesh, fields: &FieldSet, path: &Path) -> Result<()> {
    write_atomic(path, field_vtk_text(mesh, fields)?.as_bytes())
}

/// Contents of a legacy VTK file as written by [`write_field_vtk`].
#[derive(Debug, Clone, PartialEq)]
pub struct VtkData {
    pub points: Vec<[f64; 2]>,
    pub triangles: Vec<[usize; 3]>,
    pub fields: FieldSet,
}

impl VtkData {
    /// Checks that the file describes exactly `mesh`.
    pub fn check_mesh(&self, mesh: &TriMesh, path: &Path) -> Result<()> {
        let same = self.points.len() == mesh.n_vertices()
            && self.triangles == mesh.triangles()
            && self
                .points
                .iter()
                .zip(mesh.vertices())
                .all(|(a, b)| (a[0] - b[0]).abs() <= 1e-12 && (a[1] - b[1]).abs() <= 1e-12);
        if !same {
            return Err(Error::MeshMismatch(format!(
                "{} does not match the configured mesh ({} vertices, {} triangles)",
                path.display(),
                mesh.n_vertices(),
                mesh.n_triangles()
            )));
        }
        Ok(())
    }
}

pub fn read_field_vtk(path: &Path) -> Result<VtkData> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_field_vtk(&text).map_err(|message| Error::Format {
        path: PathBuf::from(path),
        message,
    })
}

pub fn parse_field_vtk(text: &str) -> std::result::Result<VtkData, String> {
    let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
    let mut next = |what: &str| {
        lines
            .next()
            .ok_or_else(|| format!("unexpected end of file, expected {what}"))
    };
    if !next("header")?.starts_with("# vtk DataFile") {
        return Err("missing `# vtk DataFile` header".into());
    }
    next("title")?;
    if next("format")? != "ASCII" {
        return Err("only ASCII files are supported".into());
    }
    if next("dataset")? != "DATASET UNSTRUCTURED_GRID" {
        return Err("expected DATASET UNSTRUCTURED_GRID".into());
    }
    let count = |line: &str, keyword: &str| -> std::result::Result<usize, String> {
        let mut it = line.split_whitespace();
        if it.next() != Some(keyword) {
            return Err(format!("expected {keyword}, got `{line}`"));
        }
        it.next()
            .and_then(|n| n.parse().ok())
            .ok_or_else(|| format!("bad count in `{line}`"))
    };
    let num = |tok: &str| {
        tok.parse::<f64>()
            .map_err(|_| format!("bad number `{tok}`"))
    };
    let idx = |tok: &str| {
        tok.parse::<usize>()
            .map_err(|_| format!("bad index `{tok}`"))
    };

    let nv = count(next("POINTS")?, "POINTS")?;
    let mut points = Vec::with_capacity(nv);
    for _ in 0..nv {
        let toks: Vec<&str> = next("point")?.split_whitespace().collect();
        if toks.len() != 3 {
            return Err("point lines need three coordinates".into());
        }
        points.push([num(toks[0])?, num(toks[1])?]);
    }
    let nt = count(next("CELLS")?, "CELLS")?;
    let mut triangles = Vec::with_capacity(nt);
    for _ in 0..nt {
        let toks: Vec<&str> = next("cell")?.split_whitespace().collect();
        if toks.len() != 4 || toks[0] != "3" {
            return Err("only triangle cells are supported".into());
        }
        let t = [idx(toks[1])?, idx(toks[2])?, idx(toks[3])?];
        if t.iter().any(|&v| v >= nv) {
            return Err(format!("cell references vertex beyond {nv}"));
        }
        triangles.push(t);
    }
    if count(next("CELL_TYPES")?, "CELL_TYPES")? != nt {
        return Err("CELL_TYPES count differs from CELLS".into());
    }
    for _ in 0..nt {
        if next("cell type")? != "5" {
            return Err("only VTK_TRIANGLE (5) cells are supported".into());
        }
    }
    let mut fields = FieldSet::default();
    let mut current: Option<(bool, usize)> = None;
    while let Ok(line) = next("data") {
        if line.starts_with("POINT_DATA") {
            let n = count(line, "POINT_DATA")?;
            if n != nv {
                return Err("POINT_DATA count differs from POINTS".into());
            }
            current = Some((true, n));
            continue;
        }
        if line.starts_with("CELL_DATA") {
            let n = count(line, "CELL_DATA")?;
            if n != nt {
                return Err("CELL_DATA count differs from CELLS".into());
            }
            current = Some((false, n));
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.first() != Some(&"SCALARS") || toks.len() < 3 {
            return Err(format!("expected SCALARS, got `{line}`"));
        }
        let (is_point, n) = current.ok_or("SCALARS before POINT_DATA or CELL_DATA")?;
        let name = toks[1].to_string();
        if next("LOOKUP_TABLE")?.split_whitespace().next() != Some("LOOKUP_TABLE") {
            return Err("expected LOOKUP_TABLE".into());
        }
        let mut values = Vec::with_capacity(n);
        while values.len() < n {
            for tok in next("value")?.split_whitespace() {
                values.push(num(tok)?);
            }
        }
        if values.len() != n {
            return Err(format!(
                "array `{name}` has {} values, expected {n}",
                values.len()
            ));
        }
        if is_point {
            fields.point.push((name, values));
        } else {
            fields.cell.push((name, values));
        }
    }
    Ok(VtkData {
        points,
        triangles,
        fields,
    })
}

pub const HISTORY_HEADER: &str = "iter,J,P,theta,volume,fulfillment,kappa";

pub fn history_csv_text(history: &[IterationRecord]) -> String {
    let mut s = String::from(HISTORY_HEADER);
    s.push('\n');
    for r in history {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.iteration,
            format_f64(r.objective),
            format_f64(r.penalty),
            format_f64(r.theta),
            format_f64(r.volume),
            format_f64(r.fulfillment),
            format_f64(r.kappa)
        );
    }
    s
}

pub fn write_history_csv(history: &[IterationRecord], path: &Path) -> Result<()> {
    write_atomic(path, history_csv_text(history).as_bytes())
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct PhaseJson {
    pub converged: bool,
    pub iterations: usize,
    pub theta: f64,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct MinimizerJson {
    pub round: usize,
    #[serde(rename = "J")]
    pub objective: f64,
    pub fulfillment: f64,
    pub volume: f64,
    pub deflated: Option<PhaseJson>,
    pub restart: PhaseJson,
    /// Distances to minimizers `0..round`.
    pub distances: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct SummaryJson {
    pub minimizers: Vec<MinimizerJson>,
    pub distance_matrix: Vec<Vec<f64>>,
}

pub fn summary_json(result: &DeflationResult, mesh: &TriMesh) -> Result<SummaryJson> {
    let d = result.distances(mesh)?;
    let phase = |p: &crate::deflation::PhaseSummary| PhaseJson {
        converged: p.converged(),
        iterations: p.iterations,
        theta: p.theta,
    };
    let minimizers = result
        .solutions
        .iter()
        .enumerate()
        .map(|(i, m)| MinimizerJson {
            round: m.round,
            objective: m.objective,
            fulfillment: m.fulfillment,
            volume: m.volume,
            deflated: m.deflated.as_ref().map(phase),
            restart: phase(&m.restart),
            distances: d[i][..i].to_vec(),
        })
        .collect();
    Ok(SummaryJson {
        minimizers,
        distance_matrix: d,
    })
}

pub fn write_summary_json(result: &DeflationResult, mesh: &TriMesh, path: &Path) -> Result<()> {
    let summary = summary_json(result, mesh)?;
    let mut text = serde_json::to_string_pretty(&summary)
        .map_err(|e| Error::Consistency(format!("summary serialization: {e}")))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}
