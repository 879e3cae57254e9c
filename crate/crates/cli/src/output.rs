//! Run artifacts: epoch curves, confusion matrices (CSV and SVG), index
//! lists, and the output-directory lock.

use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use vitforge_core::metrics::ConfusionMatrix;
use vitforge_core::train::EpochRecord;

pub const CURVES_HEADER: &str = "epoch,train_loss,train_acc,val_loss,val_acc,val_precision_macro,val_recall_macro";
pub const LOCK_FILE: &str = ".vitforge.lock";

pub fn curves_csv(records: &[EpochRecord]) -> String {
    let mut out = format!("{CURVES_HEADER}\n");
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.epoch, r.train_loss, r.train_accuracy, r.val_loss, r.val_accuracy, r.val_precision_macro, r.val_recall_macro
        );
    }
    out
}

/// `K×K` counts with class names as header row and first column; rows are
/// true classes, columns predictions.
pub fn confusion_csv(cm: &ConfusionMatrix) -> String {
    let mut out = String::from("true\\predicted");
    for name in cm.classes() {
        let _ = write!(out, ",{name}");
    }
    out.push('\n');
    for (i, name) in cm.classes().iter().enumerate() {
        out.push_str(name);
        for j in 0..cm.num_classes() {
            let _ = write!(out, ",{}", cm.get(i, j));
        }
        out.push('\n');
    }
    out
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Heatmap of the confusion matrix; cell shade is the share of the true
/// class's samples, and each cell shows its count.
pub fn confusion_svg(cm: &ConfusionMatrix, title: &str) -> String {
    const CELL: usize = 64;
    let k = cm.num_classes();
    let label_w = cm.classes().iter().map(|c| c.len()).max().unwrap_or(0) * 7 + 16;
    let (left, top) = (label_w + 24, 56);
    let width = left + k * CELL + 16;
    let height = top + k * CELL + label_w + 32;
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{width}" height="{height}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, width / 2, xml_escape(title));
    let _ = writeln!(s, r#"<text x="{}" y="42" text-anchor="middle">predicted</text>"#, left + k * CELL / 2);
    let _ = writeln!(
        s,
        r#"<text x="12" y="{y}" text-anchor="middle" transform="rotate(-90 12 {y})">true</text>"#,
        y = top + k * CELL / 2
    );
    for i in 0..k {
        let support = cm.row_sum(i).max(1) as f64;
        for j in 0..k {
            let count = cm.get(i, j);
            let share = count as f64 / support;
            // white to dark blue
            let shade = |full: f64| (255.0 - share * (255.0 - full)).round() as u8;
            let (r, g, b) = (shade(8.0), shade(48.0), shade(107.0));
            let (x, y) = (left + j * CELL, top + i * CELL);
            let _ = writeln!(s, r#"<rect x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="rgb({r},{g},{b})" stroke="gray"/>"#);
            let ink = if share > 0.5 { "white" } else { "black" };
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" text-anchor="middle" dominant-baseline="middle" fill="{ink}">{count}</text>"#,
                x + CELL / 2,
                y + CELL / 2
            );
        }
    }
    for (i, name) in cm.classes().iter().enumerate() {
        let name = xml_escape(name);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end" dominant-baseline="middle">{name}</text>"#,
            left - 6,
            top + i * CELL + CELL / 2
        );
        let (x, y) = (left + i * CELL + CELL / 2, top + k * CELL + 8);
        let _ = writeln!(s, r#"<text x="{x}" y="{y}" text-anchor="end" transform="rotate(-60 {x} {y})">{name}</text>"#);
    }
    s.push_str("</svg>\n");
    s
}

pub fn write_file(path: &Path, contents: &str) -> io::Result<()> {
    fs::write(path, contents)
}

/// One path per line.
pub fn index_text(paths: &[String]) -> String {
    paths.iter().map(|p| format!("{p}\n")).collect()
}

pub fn read_index(path: &Path) -> io::Result<Vec<String>> {
    Ok(fs::read_to_string(path)?.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    /// Fails with `AlreadyExists` while another process holds the lock.
    pub fn acquire(dir: &Path) -> io::Result<Self> {
        let path = dir.join(LOCK_FILE);
        let mut file = OpenOptions::new().write(true).create_new(true).open(&path)?;
        writeln!(file, "{}", std::process::id())?;
        Ok(Self { path })
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}
