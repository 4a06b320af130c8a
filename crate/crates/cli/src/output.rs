//! Data files: CSV rows, JSON documents and gnuplot scripts, each written
//! to a temporary sibling and renamed into place.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

/// Writes `bytes` to `path` via a temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

/// Header from the field names of `T`, then one line per row (LF endings).
pub fn csv_bytes<T: Serialize>(rows: &[T]) -> Vec<u8> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    for r in rows {
        w.serialize(r).expect("rows serialize");
    }
    w.into_inner().expect("in-memory writer")
}

/// Pretty JSON with a trailing newline.
pub fn json_bytes<T: Serialize + ?Sized>(value: &T) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(value).expect("value serializes");
    v.push(b'\n');
    v
}

/// A gnuplot script plotting columns of a CSV file.
#[derive(Clone, Debug)]
pub struct PlotSpec {
    pub title: String,
    pub x: &'static str,
    pub y: &'static str,
    pub log_x: bool,
    pub log_y: bool,
    /// Column used to split the data into separate curves.
    pub group_by: Option<&'static str>,
    /// The x column holds labels rather than numbers.
    pub categorical: bool,
}

impl PlotSpec {
    pub fn script(&self, csv_name: &str, columns: &[&str]) -> String {
        let col = |name: &str| columns.iter().position(|c| *c == name).map_or(1, |i| i + 1);
        let mut s = String::new();
        s.push_str("set datafile separator ','\n");
        s.push_str("set key autotitle columnhead\n");
        s.push_str(&format!("set title '{}'\n", self.title));
        s.push_str(&format!("set xlabel '{}'\nset ylabel '{}'\n", self.x, self.y));
        if self.log_x {
            s.push_str("set logscale x\n");
        }
        if self.log_y {
            s.push_str("set logscale y\n");
        }
        let (x, y) = (col(self.x), col(self.y));
        if self.categorical {
            s.push_str(&format!("set style fill solid\nplot '{csv_name}' using 0:{y}:xtic({x}) with boxes notitle\n"));
            return s;
        }
        match self.group_by {
            Some(g) => {
                let g = col(g);
                s.push_str(&format!(
                    "stats '{csv_name}' using {g} nooutput\n\
                     plot for [k=int(STATS_min):int(STATS_max)] '{csv_name}' using {x}:(column({g}) == k ? column({y}) : 1/0) with linespoints title sprintf('%d', k)\n"
                ));
            }
            None => s.push_str(&format!("plot '{csv_name}' using {x}:{y} with linespoints\n")),
        }
        s
    }
}

/// Payload of one method run, before it touches the disk.
#[derive(Clone, Debug)]
pub struct Payload {
    pub csv: Vec<u8>,
    pub columns: Vec<&'static str>,
    pub json: Vec<u8>,
    pub plot: Option<PlotSpec>,
    /// Counters for the run summary.
    pub stats: serde_json::Value,
}

/// Writes the data files for `method` under `dir`; returns their paths.
pub fn write_payload(
    dir: &Path,
    method: &str,
    payload: &Payload,
    csv: bool,
    json: bool,
) -> std::io::Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    if csv {
        let p = dir.join(format!("{method}.csv"));
        write_atomic(&p, &payload.csv)?;
        files.push(p);
        if let Some(plot) = &payload.plot {
            let p = dir.join(format!("{method}.gp"));
            write_atomic(&p, plot.script(&format!("{method}.csv"), &payload.columns).as_bytes())?;
            files.push(p);
        }
    }
    if json {
        let p = dir.join(format!("{method}.json"));
        write_atomic(&p, &payload.json)?;
        files.push(p);
    }
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Serialize)]
    struct Row {
        t: f64,
        state: usize,
        mass: Option<f64>,
    }

    #[test]
    fn csv_layout() {
        let rows = [
            Row { t: 0.5, state: 1, mass: Some(0.25) },
            Row { t: 1.0, state: 2, mass: None },
        ];
        assert_eq!(String::from_utf8(csv_bytes(&rows)).unwrap(), "t,state,mass\n0.5,1,0.25\n1.0,2,\n");
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/a.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        assert_eq!(fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }

    #[test]
    fn plot_script_names_columns() {
        let spec = PlotSpec {
            title: "x".into(),
            x: "t",
            y: "mass",
            log_x: false,
            log_y: true,
            group_by: Some("state"),
            categorical: false,
        };
        let s = spec.script("a.csv", &["t", "state", "mass"]);
        assert!(s.contains("using 2 nooutput"));
        assert!(s.contains("using 1:(column(2) == k ? column(3) : 1/0)"));
        assert!(s.contains("set logscale y"));
    }
}
