use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const CSV_HEADER: &str =
    "round,accuracy,n_selected,n_malicious_selected,bytes_up,bytes_down,attack_objective,wall_ms";
pub const SELECTION_CSV_HEADER: &str = "round,client,cosine,wasserstein,admitted,malicious";

/// Per-client selection record for one round.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClientRecord {
    pub client: usize,
    pub cosine: f64,
    pub wasserstein: f64,
    pub admitted: bool,
    pub malicious: bool,
    /// Clip threshold used for the upload, if quantized.
    pub alpha: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundMetrics {
    /// 1-based.
    pub round: usize,
    pub accuracy: f64,
    pub participants: Vec<usize>,
    pub selected: Vec<usize>,
    pub clients: Vec<ClientRecord>,
    pub n_malicious_selected: usize,
    pub bytes_up: u64,
    pub bytes_down: u64,
    pub attack_objective: f64,
    pub wall_ms: u64,
}

/// The subset of [`RoundMetrics`] stored in the round CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvRow {
    pub round: usize,
    pub accuracy: f64,
    pub n_selected: usize,
    pub n_malicious_selected: usize,
    pub bytes_up: u64,
    pub bytes_down: u64,
    pub attack_objective: f64,
    pub wall_ms: u64,
}

impl From<&RoundMetrics> for CsvRow {
    fn from(m: &RoundMetrics) -> Self {
        CsvRow {
            round: m.round,
            accuracy: m.accuracy,
            n_selected: m.selected.len(),
            n_malicious_selected: m.n_malicious_selected,
            bytes_up: m.bytes_up,
            bytes_down: m.bytes_down,
            attack_objective: m.attack_objective,
            wall_ms: m.wall_ms,
        }
    }
}

impl CsvRow {
    fn to_line(&self) -> String {
        // `{}` on f64 prints the shortest string that parses back exactly.
        format!(
            "{},{},{},{},{},{},{},{}",
            self.round,
            self.accuracy,
            self.n_selected,
            self.n_malicious_selected,
            self.bytes_up,
            self.bytes_down,
            self.attack_objective,
            self.wall_ms
        )
    }

    fn parse(line: &str, line_no: usize) -> Result<Self> {
        let bad = |what: &str| Error::Config(format!("csv line {line_no}: bad {what}"));
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 8 {
            return Err(bad("column count"));
        }
        Ok(CsvRow {
            round: cols[0].parse().map_err(|_| bad("round"))?,
            accuracy: cols[1].parse().map_err(|_| bad("accuracy"))?,
            n_selected: cols[2].parse().map_err(|_| bad("n_selected"))?,
            n_malicious_selected: cols[3].parse().map_err(|_| bad("n_malicious_selected"))?,
            bytes_up: cols[4].parse().map_err(|_| bad("bytes_up"))?,
            bytes_down: cols[5].parse().map_err(|_| bad("bytes_down"))?,
            attack_objective: cols[6].parse().map_err(|_| bad("attack_objective"))?,
            wall_ms: cols[7].parse().map_err(|_| bad("wall_ms"))?,
        })
    }
}

/// Streams round rows (and per-client selection rows) to disk, flushing
/// after every round.
pub struct CsvSink {
    path: PathBuf,
    rounds: BufWriter<File>,
    selection: Option<(PathBuf, BufWriter<File>)>,
}

/// `metrics.csv` -> `metrics.selection.csv`.
pub fn selection_path(path: &Path) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("metrics");
    path.with_file_name(format!("{stem}.selection.csv"))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

impl CsvSink {
    pub fn create(path: &Path, with_selection_log: bool) -> Result<Self> {
        let mut rounds = create(path)?;
        writeln!(rounds, "{CSV_HEADER}").map_err(|e| Error::io(path, e))?;
        rounds.flush().map_err(|e| Error::io(path, e))?;
        let selection = if with_selection_log {
            let sel_path = selection_path(path);
            let mut w = create(&sel_path)?;
            writeln!(w, "{SELECTION_CSV_HEADER}").map_err(|e| Error::io(&sel_path, e))?;
            Some((sel_path, w))
        } else {
            None
        };
        Ok(CsvSink {
            path: path.to_path_buf(),
            rounds,
            selection,
        })
    }

    pub fn write(&mut self, m: &RoundMetrics) -> Result<()> {
        let path = &self.path;
        writeln!(self.rounds, "{}", CsvRow::from(m).to_line()).map_err(|e| Error::io(path, e))?;
        self.rounds.flush().map_err(|e| Error::io(path, e))?;
        if let Some((sel_path, w)) = self.selection.as_mut() {
            for c in &m.clients {
                writeln!(
                    w,
                    "{},{},{},{},{},{}",
                    m.round,
                    c.client,
                    c.cosine,
                    c.wasserstein,
                    u8::from(c.admitted),
                    u8::from(c.malicious)
                )
                .map_err(|e| Error::io(&*sel_path, e))?;
            }
            w.flush().map_err(|e| Error::io(&*sel_path, e))?;
        }
        Ok(())
    }
}

/// Writes the header and one row per round.
pub fn emit_csv(metrics: &[RoundMetrics], path: &Path) -> Result<()> {
    let mut sink = CsvSink::create(path, false)?;
    for m in metrics {
        sink.write(m)?;
    }
    Ok(())
}

/// Renders the round CSV in memory.
pub fn csv_string(metrics: &[RoundMetrics]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for m in metrics {
        out.push_str(&CsvRow::from(m).to_line());
        out.push('\n');
    }
    out
}

pub fn read_csv(path: &Path) -> Result<Vec<CsvRow>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    match lines.next() {
        Some(Ok(h)) if h == CSV_HEADER => {}
        Some(Err(e)) => return Err(Error::io(path, e)),
        _ => return Err(Error::Config(format!("{}: missing csv header", path.display()))),
    }
    lines
        .enumerate()
        .map(|(i, l)| {
            let l = l.map_err(|e| Error::io(path, e))?;
            CsvRow::parse(&l, i + 2)
        })
        .collect()
}
