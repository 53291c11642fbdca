use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use super::{IntensityLevel, MemeRecord, Split, TargetCategory};

/// Counts for one split: dark/non-dark totals and the target × intensity
/// contingency table over dark memes.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SplitStats {
    pub non_dark: u64,
    pub dark: u64,
    /// `cells[target][intensity - 1]`
    pub cells: [[u64; 3]; 6],
}

impl SplitStats {
    pub fn cell(&self, target: TargetCategory, intensity: IntensityLevel) -> u64 {
        self.cells[target.index()][intensity.index()]
    }

    pub fn row_total(&self, target: TargetCategory) -> u64 {
        self.cells[target.index()].iter().sum()
    }

    pub fn intensity_total(&self, intensity: IntensityLevel) -> u64 {
        self.cells.iter().map(|row| row[intensity.index()]).sum()
    }

    pub fn table_total(&self) -> u64 {
        self.cells.iter().flatten().sum()
    }

    pub fn total(&self) -> u64 {
        self.non_dark + self.dark
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DatasetStats {
    pub splits: BTreeMap<Split, SplitStats>,
}

impl DatasetStats {
    pub fn split(&self, split: Split) -> Option<&SplitStats> {
        self.splits.get(&split)
    }
}

pub fn compute_stats(records: &[MemeRecord]) -> DatasetStats {
    let mut splits: BTreeMap<Split, SplitStats> = BTreeMap::new();
    for r in records {
        let s = splits.entry(r.split).or_default();
        match (r.dark_humor, r.target, r.intensity) {
            (true, Some(t), Some(i)) => {
                s.dark += 1;
                s.cells[t.index()][i.index()] += 1;
            }
            // Records reaching here have passed validation, so a dark record
            // always carries both labels.
            (true, _, _) => s.dark += 1,
            (false, _, _) => s.non_dark += 1,
        }
    }
    DatasetStats { splits }
}

fn thousands(n: u64) -> String {
    let digits = n.to_string();
    let mut out = String::with_capacity(digits.len() + digits.len() / 3);
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

/// Renders one split as a block of lines in the dataset-summary layout.
fn split_block(split: Split, s: &SplitStats) -> (Vec<String>, Vec<String>) {
    let name = match split {
        Split::Train => "Train Data",
        Split::Test => "Test Data",
    };
    let dark = vec![
        format!("{name}"),
        format!("{:<10} {:>7}", "Dark Humor", "Count"),
        format!("{:<10} {:>7}", "No", thousands(s.non_dark)),
        format!("{:<10} {:>7}", "Yes", thousands(s.dark)),
    ];
    let mut table = vec![
        format!("{name}: Target vs Intensity"),
        format!(
            "{:<26} {:>6} {:>6} {:>6} {:>7}",
            "Target", "1", "2", "3", "Total"
        ),
    ];
    for t in TargetCategory::ALL {
        let row = &s.cells[t.index()];
        table.push(format!(
            "{:<26} {:>6} {:>6} {:>6} {:>7}",
            t.as_str(),
            thousands(row[0]),
            thousands(row[1]),
            thousands(row[2]),
            thousands(s.row_total(t))
        ));
    }
    let [mild, moderate, severe] = IntensityLevel::ALL.map(|i| thousands(s.intensity_total(i)));
    table.push(format!(
        "{:<26} {:>6} {:>6} {:>6} {:>7}",
        "Total",
        mild,
        moderate,
        severe,
        thousands(s.table_total())
    ));
    (dark, table)
}

fn side_by_side(out: &mut String, blocks: &[Vec<String>]) {
    let widths: Vec<usize> = blocks
        .iter()
        .map(|b| b.iter().map(|l| l.chars().count()).max().unwrap_or(0))
        .collect();
    let rows = blocks.iter().map(Vec::len).max().unwrap_or(0);
    for r in 0..rows {
        let mut line = String::new();
        for (b, block) in blocks.iter().enumerate() {
            let cell = block.get(r).map(String::as_str).unwrap_or("");
            if b + 1 < blocks.len() {
                let pad = widths[b] - cell.chars().count();
                let _ = write!(line, "{cell}{} || ", " ".repeat(pad));
            } else {
                line.push_str(cell);
            }
        }
        let _ = writeln!(out, "{}", line.trim_end());
    }
}

impl fmt::Display for DatasetStats {
    /// Train and test panels side by side: dark/non-dark counts first, then
    /// the target × intensity table with marginals.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let blocks: Vec<_> = self
            .splits
            .iter()
            .map(|(split, s)| split_block(*split, s))
            .collect();
        let (dark, tables): (Vec<_>, Vec<_>) = blocks.into_iter().unzip();
        let mut out = String::new();
        side_by_side(&mut out, &dark);
        out.push('\n');
        side_by_side(&mut out, &tables);
        f.write_str(&out)
    }
}
