//! CSV, legacy VTK and JSON writers.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use poroflate_core::mesh::Grid;

use crate::error::Error;

/// Version of the CSV layouts, written into the leading comment line.
pub const CSV_SCHEMA: u32 = 1;

pub fn ensure_dir(dir: &Path) -> Result<(), Error> {
  fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<PathBuf, Error> {
  fs::write(path, text).map_err(|e| Error::io(path, e))?;
  Ok(path.to_path_buf())
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<PathBuf, Error> {
  let text = serde_json::to_string_pretty(value).map_err(|e| Error::io(path, e))?;
  write_text(path, &(text + "\n"))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Error> {
  let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
  serde_json::from_str(&text).map_err(|e| Error::io(path, e))
}

/// Comma separated table with a `# poroflate <kind> schema <n>` first line.
pub struct Csv {
  text: String,
  columns: usize,
}

impl Csv {
  pub fn new(kind: &str, header: &[&str]) -> Self {
    let mut text = format!("# poroflate {kind} schema {CSV_SCHEMA}\n");
    text.push_str(&header.join(","));
    text.push('\n');
    Self { text, columns: header.len() }
  }

  pub fn row(&mut self, cells: &[String]) {
    debug_assert_eq!(cells.len(), self.columns);
    self.text.push_str(&cells.join(","));
    self.text.push('\n');
  }

  pub fn numbers(&mut self, values: &[f64]) {
    self.row(&values.iter().map(|v| v.to_string()).collect::<Vec<_>>());
  }

  pub fn as_str(&self) -> &str {
    &self.text
  }

  pub fn write(&self, path: &Path) -> Result<PathBuf, Error> {
    write_text(path, &self.text)
  }
}

/// Per-axis vertex coordinates of a tensor grid.
fn axis_coords(grid: &Grid) -> [Vec<f64>; 3] {
  let mut out: [Vec<f64>; 3] = Default::default();
  for (a, c) in out.iter_mut().enumerate() {
    if a >= grid.dim {
      c.push(0.0);
      continue;
    }
    for i in 0..=grid.n[a] {
      let mut p = [0, 0, 0];
      p[a] = i;
      c.push(grid.vertices[grid.lattice_index(1, p)][a]);
    }
  }
  out
}

pub enum Field<'a> {
  Scalar(&'a str, Vec<f64>),
  Vector(&'a str, Vec<[f64; 3]>),
}

/// Legacy ASCII rectilinear grid with point and cell data.
pub fn write_vtk(path: &Path, title: &str, grid: &Grid, points: &[Field], cells: &[Field]) -> Result<PathBuf, Error> {
  let c = axis_coords(grid);
  let mut s = String::new();
  let _ = writeln!(s, "# vtk DataFile Version 3.0\n{}\nASCII\nDATASET RECTILINEAR_GRID", title.replace('\n', " "));
  let _ = writeln!(s, "DIMENSIONS {} {} {}", c[0].len(), c[1].len(), c[2].len());
  for (name, axis) in ["X", "Y", "Z"].iter().zip(&c) {
    let _ = writeln!(s, "{name}_COORDINATES {} double", axis.len());
    let _ = writeln!(s, "{}", axis.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" "));
  }
  let section = |s: &mut String, kind: &str, n: usize, fields: &[Field]| {
    if fields.is_empty() {
      return;
    }
    let _ = writeln!(s, "{kind} {n}");
    for f in fields {
      match f {
        Field::Scalar(name, v) => {
          debug_assert_eq!(v.len(), n);
          let _ = writeln!(s, "SCALARS {name} double 1\nLOOKUP_TABLE default");
          for x in v {
            let _ = writeln!(s, "{x}");
          }
        }
        Field::Vector(name, v) => {
          debug_assert_eq!(v.len(), n);
          let _ = writeln!(s, "VECTORS {name} double");
          for x in v {
            let _ = writeln!(s, "{} {} {}", x[0], x[1], x[2]);
          }
        }
      }
    }
  };
  section(&mut s, "POINT_DATA", grid.vertices.len(), points);
  section(&mut s, "CELL_DATA", grid.n_elements(), cells);
  write_text(path, &s)
}
