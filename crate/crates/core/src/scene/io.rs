//! Line-oriented scene files.
//!
//! ```text
//! scene <seed> <extent_m>
//! points <n>
//! x y z r t            (n lines)
//! boxes <m>
//! lx ly lz wx wy wz alpha class   (m lines)
//! ```
//!
//! Floats are written with Rust's shortest round-trip formatting, so a
//! write/read cycle is bit-exact.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use super::{BBox, Point, Scene};
use crate::error::{Error, Result};

pub fn write_scene<W: Write>(scene: &Scene, mut w: W) -> std::io::Result<()> {
    writeln!(w, "scene {} {}", scene.seed, scene.extent_m)?;
    writeln!(w, "points {}", scene.points.len())?;
    for p in &scene.points {
        writeln!(w, "{} {} {} {} {}", p.x, p.y, p.z, p.r, p.t)?;
    }
    writeln!(w, "boxes {}", scene.boxes.len())?;
    for b in &scene.boxes {
        writeln!(
            w,
            "{} {} {} {} {} {} {} {}",
            b.lx, b.ly, b.lz, b.wx, b.wy, b.wz, b.alpha, b.class_id
        )?;
    }
    Ok(())
}

pub fn write_scene_file(scene: &Scene, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    write_scene(scene, &mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_scene_file(path: &Path) -> Result<Scene> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_scene(f)
}

struct Lines<R> {
    inner: std::io::Lines<BufReader<R>>,
    line: usize,
}

fn perr(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        what: "scene",
        line,
        msg: msg.into(),
    }
}

impl<R: Read> Lines<R> {
    fn next_fields(&mut self) -> Result<Vec<String>> {
        self.line += 1;
        match self.inner.next() {
            Some(Ok(l)) => Ok(l.split_whitespace().map(str::to_string).collect()),
            Some(Err(e)) => Err(perr(self.line, e.to_string())),
            None => Err(perr(self.line, "unexpected end of file")),
        }
    }

    fn header(&mut self, tag: &str) -> Result<usize> {
        let f = self.next_fields()?;
        if f.len() != 2 || f[0] != tag {
            return Err(perr(self.line, format!("expected `{tag} <count>`")));
        }
        f[1].parse().map_err(|_| perr(self.line, "bad count"))
    }

    fn floats(&mut self, n: usize) -> Result<Vec<f64>> {
        let f = self.next_fields()?;
        if f.len() != n {
            return Err(perr(
                self.line,
                format!("expected {n} fields, found {}", f.len()),
            ));
        }
        f.iter()
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|_| perr(self.line, format!("bad number `{s}`")))
            })
            .collect()
    }
}

pub fn read_scene<R: Read>(r: R) -> Result<Scene> {
    let mut lines = Lines {
        inner: BufReader::new(r).lines(),
        line: 0,
    };
    let head = lines.next_fields()?;
    if head.len() != 3 || head[0] != "scene" {
        return Err(perr(1, "expected `scene <seed> <extent_m>`"));
    }
    let seed = head[1].parse().map_err(|_| perr(1, "bad seed"))?;
    let extent_m: f64 = head[2].parse().map_err(|_| perr(1, "bad extent"))?;

    let n = lines.header("points")?;
    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        let v = lines.floats(5)?;
        points.push(Point {
            x: v[0],
            y: v[1],
            z: v[2],
            r: v[3],
            t: v[4],
        });
    }
    let m = lines.header("boxes")?;
    let mut boxes = Vec::with_capacity(m);
    for _ in 0..m {
        let f = lines.next_fields()?;
        if f.len() != 8 {
            return Err(perr(lines.line, "expected 8 box fields"));
        }
        let v: Vec<f64> = f[..7]
            .iter()
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|_| perr(lines.line, format!("bad number `{s}`")))
            })
            .collect::<Result<_>>()?;
        let class_id = f[7].parse().map_err(|_| perr(lines.line, "bad class id"))?;
        if v[3] <= 0.0 || v[4] <= 0.0 || v[5] <= 0.0 {
            return Err(perr(lines.line, "box dimensions must be positive"));
        }
        boxes.push(BBox {
            lx: v[0],
            ly: v[1],
            lz: v[2],
            wx: v[3],
            wy: v[4],
            wz: v[5],
            alpha: v[6],
            class_id,
        });
    }
    Ok(Scene {
        seed,
        extent_m,
        points,
        boxes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::generate_scene;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn roundtrip_is_bit_exact(seed in 0u64..10_000, objects in 0usize..6, clusters in 0usize..4) {
            let s = generate_scene(seed, objects, clusters, 40.0);
            let mut buf = Vec::new();
            write_scene(&s, &mut buf).unwrap();
            let back = read_scene(buf.as_slice()).unwrap();
            prop_assert_eq!(back, s);
        }
    }

    #[test]
    fn truncated_file_reports_line() {
        let text = "scene 1 40\npoints 2\n1 2 3 0.5 0.5\n";
        match read_scene(text.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("unexpected {other:?}"),
        }
    }
}
