//! CSV and checkpoint plumbing for run directories.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use raev2::checkpoint::Checkpoint;
use raev2::data::Dataset;
use raev2::Tensor;

/// A CSV table: `#` provenance lines, a header row, then data rows.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Csv {
    pub comments: Vec<String>,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Csv {
    pub fn new(provenance: &str, header: &[&str]) -> Self {
        Csv {
            comments: vec![provenance.trim_start_matches('#').trim().to_string()],
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for c in &self.comments {
            let _ = writeln!(s, "# {c}");
        }
        let _ = writeln!(s, "{}", self.header.join(","));
        for r in &self.rows {
            let _ = writeln!(s, "{}", r.join(","));
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_file(path, self.render().as_bytes())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut csv = Csv::default();
        for line in text.lines() {
            if let Some(c) = line.strip_prefix('#') {
                csv.comments.push(c.trim().to_string());
            } else if line.trim().is_empty() {
                continue;
            } else if csv.header.is_empty() {
                csv.header = line.split(',').map(str::to_string).collect();
            } else {
                let row: Vec<String> = line.split(',').map(str::to_string).collect();
                if row.len() != csv.header.len() {
                    bail!("row has {} fields, header has {}", row.len(), csv.header.len());
                }
                csv.rows.push(row);
            }
        }
        if csv.header.is_empty() {
            bail!("csv has no header");
        }
        Ok(csv)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn column_index(&self, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| anyhow!("missing column `{name}` (have {})", self.header.join(",")))
    }

    pub fn column_f64(&self, name: &str) -> Result<Vec<f64>> {
        let i = self.column_index(name)?;
        self.rows
            .iter()
            .map(|r| r[i].parse::<f64>().map_err(|e| anyhow!("column `{name}` value `{}`: {e}", r[i])))
            .collect()
    }

    pub fn column_str(&self, name: &str) -> Result<Vec<String>> {
        let i = self.column_index(name)?;
        Ok(self.rows.iter().map(|r| r[i].clone()).collect())
    }
}

/// Shortest round-trip float formatting; deterministic across runs.
pub fn num(x: f64) -> String {
    format!("{x}")
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    ck.save(path)?;
    Ok(())
}

pub fn labels_tensor(labels: &[usize]) -> Tensor<f64> {
    Tensor::from_vec(&[labels.len()], labels.iter().map(|&l| l as f64).collect()).expect("dims")
}

pub fn labels_from(t: &Tensor<f64>) -> Vec<usize> {
    t.data().iter().map(|&v| v as usize).collect()
}

pub fn dataset_checkpoint(ds: &Dataset, metadata: &str) -> Checkpoint {
    let mut ck = Checkpoint::new(metadata);
    ck.push("images", ds.images.clone());
    ck.push("labels", labels_tensor(&ds.labels));
    ck.push("shape", Tensor::<f64>::from_vec(&[2], vec![ds.classes as f64, ds.image_size as f64]).expect("dims"));
    ck
}

pub fn dataset_from_checkpoint(ck: &Checkpoint) -> Result<Dataset> {
    let shape = ck.get::<f64>("shape")?.data().to_vec();
    Ok(Dataset {
        images: ck.get::<f32>("images")?.clone(),
        labels: labels_from(ck.get::<f64>("labels")?),
        classes: shape[0] as usize,
        image_size: shape[1] as usize,
    })
}

/// Writes `[n, H, W, 3]` images in `[0,1]` as one PNG grid of `cols` columns.
pub fn write_png_grid(images: &Tensor<f32>, cols: usize, path: &Path) -> Result<()> {
    let d = images.dims();
    if d.len() != 4 || d[3] != 3 {
        bail!("expected [n, H, W, 3] images, got {d:?}");
    }
    let (n, h, w) = (d[0], d[1], d[2]);
    let cols = cols.clamp(1, n.max(1));
    let rows = n.div_ceil(cols);
    let gap = 1;
    let (gw, gh) = (cols * (w + gap) + gap, rows * (h + gap) + gap);
    let mut buf = vec![255u8; gw * gh * 3];
    for i in 0..n {
        let (oy, ox) = ((i / cols) * (h + gap) + gap, (i % cols) * (w + gap) + gap);
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let v = images.data()[((i * h + y) * w + x) * 3 + c];
                    buf[((oy + y) * gw + ox + x) * 3 + c] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                }
            }
        }
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let file = std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut enc = png::Encoder::new(std::io::BufWriter::new(file), gw as u32, gh as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    enc.write_header()?.write_image_data(&buf).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Files of a run directory.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub dir: PathBuf,
}

impl RunPaths {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        RunPaths { dir: dir.into() }
    }
    pub fn config(&self) -> PathBuf {
        self.dir.join("config.txt")
    }
    pub fn loss(&self) -> PathBuf {
        self.dir.join("loss.csv")
    }
    pub fn fid_curve(&self) -> PathBuf {
        self.dir.join("fid_curve.csv")
    }
    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.csv")
    }
    pub fn state(&self) -> PathBuf {
        self.dir.join("state.ckpt")
    }
    pub fn ema(&self) -> PathBuf {
        self.dir.join("ema.ckpt")
    }
    pub fn live(&self) -> PathBuf {
        self.dir.join("live.ckpt")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let mut c = Csv::new("# config_hash=ab,seed=1,format=1", &["a", "b"]);
        c.push(vec![num(1.5), "x".into()]);
        let back = Csv::parse(&c.render()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.column_f64("a").unwrap(), vec![1.5]);
        assert!(back.column_f64("zz").unwrap_err().to_string().contains("missing column `zz`"));
    }

    #[test]
    fn float_format_round_trips() {
        for x in [0.1, 1e-300, 123456.789, -0.0] {
            assert_eq!(num(x).parse::<f64>().unwrap().to_bits(), x.to_bits());
        }
    }

    #[test]
    fn dataset_round_trip() {
        let ds = raev2::data::gen_dataset(16, 4, 8, 3).unwrap();
        let back = dataset_from_checkpoint(&Checkpoint::from_bytes(&dataset_checkpoint(&ds, "m").to_bytes()).unwrap()).unwrap();
        assert_eq!(back, ds);
    }
}
