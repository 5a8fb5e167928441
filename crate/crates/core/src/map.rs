//! Dense global point map and its ASCII PLY form.

use std::io::{BufRead, Write};

use nalgebra::Vector3;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PlyError {
    #[error("ply: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Points in the world frame with a per-point confidence.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GlobalMap {
    pub points: Vec<Vector3<f64>>,
    pub confidences: Vec<f64>,
}

impl GlobalMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_points(points: Vec<Vector3<f64>>) -> Self {
        let confidences = vec![1.0; points.len()];
        Self { points, confidences }
    }

    pub fn push(&mut self, p: Vector3<f64>, confidence: f64) {
        self.points.push(p);
        self.confidences.push(confidence);
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn write_ply<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "ply")?;
        writeln!(w, "format ascii 1.0")?;
        writeln!(w, "element vertex {}", self.points.len())?;
        writeln!(w, "property float x")?;
        writeln!(w, "property float y")?;
        writeln!(w, "property float z")?;
        writeln!(w, "property float confidence")?;
        writeln!(w, "end_header")?;
        for (p, c) in self.points.iter().zip(&self.confidences) {
            writeln!(w, "{:.9} {:.9} {:.9} {:.6}", p.x, p.y, p.z, c)?;
        }
        Ok(())
    }

    /// Reads the ASCII PLY written by [`GlobalMap::write_ply`]. A missing
    /// `confidence` property defaults every confidence to 1.
    pub fn read_ply<R: BufRead>(r: R) -> Result<Self, PlyError> {
        let mut lines = r.lines();
        let mut next = || -> Result<Option<String>, PlyError> { Ok(lines.next().transpose()?) };
        if next()?.as_deref().map(str::trim) != Some("ply") {
            return Err(PlyError::Format("missing `ply` magic".into()));
        }
        let mut count = None;
        let mut props = Vec::new();
        loop {
            let line = next()?.ok_or_else(|| PlyError::Format("unterminated header".into()))?;
            let f: Vec<&str> = line.split_whitespace().collect();
            match f.as_slice() {
                ["end_header"] => break,
                ["format", fmt, ..] if *fmt != "ascii" => {
                    return Err(PlyError::Format(format!("unsupported format {fmt}")))
                }
                ["element", "vertex", n] => {
                    count = Some(n.parse::<usize>().map_err(|e| PlyError::Format(e.to_string()))?)
                }
                ["property", _, name] => props.push(name.to_string()),
                _ => {}
            }
        }
        let count = count.ok_or_else(|| PlyError::Format("no vertex element".into()))?;
        let idx = |n: &str| props.iter().position(|p| p == n);
        let (ix, iy, iz) = match (idx("x"), idx("y"), idx("z")) {
            (Some(a), Some(b), Some(c)) => (a, b, c),
            _ => return Err(PlyError::Format("vertex needs x, y, z".into())),
        };
        let ic = idx("confidence");
        let mut map = GlobalMap::new();
        for _ in 0..count {
            let line = next()?.ok_or_else(|| PlyError::Format("truncated vertex list".into()))?;
            let v: Vec<f64> = line
                .split_whitespace()
                .map(str::parse)
                .collect::<Result<_, _>>()
                .map_err(|e: std::num::ParseFloatError| PlyError::Format(e.to_string()))?;
            if v.len() < props.len() {
                return Err(PlyError::Format(format!("vertex line has {} fields", v.len())));
            }
            map.push(Vector3::new(v[ix], v[iy], v[iz]), ic.map_or(1.0, |i| v[i]));
        }
        Ok(map)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ply_round_trip() {
        let mut m = GlobalMap::new();
        m.push(Vector3::new(1.0, -2.0, 0.5), 3.0);
        m.push(Vector3::new(0.25, 0.0, 1e-3), 0.5);
        let mut buf = Vec::new();
        m.write_ply(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.contains("element vertex 2"));
        assert!(text.contains("property float confidence"));
        let back = GlobalMap::read_ply(std::io::Cursor::new(buf)).unwrap();
        assert_eq!(back.len(), 2);
        assert!((back.points[0] - m.points[0]).norm() < 1e-9);
        assert_eq!(back.confidences, vec![3.0, 0.5]);
    }

    #[test]
    fn ply_rejects_garbage() {
        assert!(GlobalMap::read_ply(std::io::Cursor::new("hello\n")).is_err());
        assert!(GlobalMap::read_ply(std::io::Cursor::new("ply\nelement vertex 2\nproperty float x\nend_header\n1\n")).is_err());
    }
}
