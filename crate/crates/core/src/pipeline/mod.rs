//! Batch evaluation over a case manifest and report emission.
//!
//! The metric table is CSV with a `# lesionmetrics-v1` first line and a
//! `# meta {json}` second line, then one row per (case, repeat, class,
//! configuration).

mod compare;
pub mod format;

use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::io::{load_volume, LabelPolicy, LoadedVolume};
use crate::overlap::{evaluate_class, CaseMetrics, ClassMetrics, EvaluationOptions, LesionMatchTable};
use crate::volume::{class_name, parse_class_name, LabelVolume, DEFAULT_LABELS};

pub use self::compare::{compare_tables, ComparisonReport, ComparisonRow};
use self::format::{format_g, json_number};

pub const FORMAT_TAG: &str = "lesionmetrics-v1";

/// Metric columns: (column name, display name).
pub const METRICS: [(&str, &str); 9] = [
    ("dice", "Dice"),
    ("adaptive_dice", "Adaptive Dice"),
    ("adaptive_dice_normalized", "Adaptive Dice (normalized)"),
    ("lesionwise_dice", "Lesion-wise Dice"),
    ("sds", "SDS"),
    ("msd", "MSD"),
    ("hd95", "HD95"),
    ("detection_sensitivity", "Detection Sensitivity"),
    ("detection_precision", "Detection Precision"),
];

const COUNTS: [&str; 6] = ["gt_lesions", "pred_lesions", "tp_sensitivity", "fn", "tp_precision", "fp"];

pub fn metric_value(m: &ClassMetrics, column: &str) -> Option<f64> {
    Some(match column {
        "dice" => m.dice,
        "adaptive_dice" => m.adaptive_dice,
        "adaptive_dice_normalized" => m.adaptive_dice_normalized,
        "lesionwise_dice" => m.lesionwise_dice,
        "sds" => m.sds,
        "msd" => m.msd,
        "hd95" => m.hd95,
        "detection_sensitivity" => m.sensitivity,
        "detection_precision" => m.precision,
        _ => return None,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub case_id: String,
    pub gt: PathBuf,
    pub pred: PathBuf,
    pub fold: u32,
    pub repeat: u32,
    pub config: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CaseManifest {
    pub rows: Vec<ManifestRow>,
}

impl CaseManifest {
    /// Parses a manifest; relative volume paths are resolved against `base`.
    pub fn from_reader(reader: impl Read, base: &Path) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let expected = ["case_id", "gt", "pred", "fold", "repeat", "config"];
        if headers.iter().collect::<Vec<_>>() != expected {
            return Err(Error::Manifest(format!(
                "header must be {}, found {}",
                expected.join(","),
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut rows = Vec::new();
        for (line, rec) in rdr.deserialize::<ManifestRow>().enumerate() {
            let mut row = rec.map_err(|e| Error::Manifest(format!("row {}: {e}", line + 1)))?;
            row.gt = base.join(&row.gt);
            row.pred = base.join(&row.pred);
            rows.push(row);
        }
        let manifest = CaseManifest { rows };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new(""));
        Self::from_reader(file, base)
    }

    pub fn validate(&self) -> Result<()> {
        let mut keys = BTreeSet::new();
        let mut folds: BTreeMap<&str, u32> = BTreeMap::new();
        for row in &self.rows {
            if row.case_id.is_empty() || row.config.is_empty() {
                return Err(Error::Manifest("empty case_id or config".into()));
            }
            if !keys.insert((&row.case_id, row.repeat, &row.config)) {
                return Err(Error::Manifest(format!(
                    "duplicate entry for case {:?}, repeat {}, config {:?}",
                    row.case_id, row.repeat, row.config
                )));
            }
            if let Some(&f) = folds.get(row.case_id.as_str()) {
                if f != row.fold {
                    return Err(Error::InconsistentFolds(format!(
                        "case {:?} appears in folds {f} and {}",
                        row.case_id, row.fold
                    )));
                }
            }
            folds.insert(&row.case_id, row.fold);
        }
        Ok(())
    }
}

/// Options of a batch evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct EvaluateOptions {
    pub metrics: EvaluationOptions,
    /// Class labels to evaluate, in report order.
    pub classes: Vec<u8>,
    pub label_policy: LabelPolicy,
}

impl Default for EvaluateOptions {
    fn default() -> Self {
        EvaluateOptions {
            metrics: EvaluationOptions::default(),
            classes: DEFAULT_LABELS.to_vec(),
            label_policy: LabelPolicy::PtLn,
        }
    }
}

/// Conventions recorded with every report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub connectivity: String,
    pub tolerance_mm: f64,
    pub numerator_constant: f64,
    pub hd95: String,
    pub msd: String,
    pub empty_masks: String,
    pub adaptive_dice: String,
    pub detection: String,
    pub zero_differences: String,
    pub wilcoxon: String,
}

impl ReportMetadata {
    pub fn new(opts: &EvaluationOptions) -> Self {
        ReportMetadata {
            connectivity: opts.connectivity.to_string(),
            tolerance_mm: opts.tolerance_mm,
            numerator_constant: opts.numerator_constant,
            hd95: "max of the two directed area-weighted 95th percentiles".into(),
            msd: "area-weighted mean over both directions".into(),
            empty_masks: "NaN when both masks are empty; inf when exactly one is empty".into(),
            adaptive_dice: "C*sum(w*g*p)/(sum(p)+sum(w*g)) with w=1/sqrt(lesion voxels); normalized by the perfect-prediction value".into(),
            detection: "any-overlap".into(),
            zero_differences: "dropped".into(),
            wilcoxon: "two-sided; exact for n<=25, normal approximation with tie and continuity correction above".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CaseEvaluation {
    pub metrics: CaseMetrics,
    pub lesions: BTreeMap<u8, LesionMatchTable>,
}

/// Result of one manifest row; errors are kept as text for the report.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseOutcome {
    pub row: ManifestRow,
    pub result: std::result::Result<CaseEvaluation, String>,
}

fn load_label_volume(path: &Path, policy: &LabelPolicy) -> Result<LabelVolume> {
    match load_volume(path, policy)? {
        LoadedVolume::Labels(v) => Ok(v),
        LoadedVolume::Probabilities(_) => Err(Error::UnsupportedDatatype(format!(
            "{} holds floating-point data; a label volume is required",
            path.display()
        ))),
    }
}

/// Evaluates one manifest row.
pub fn evaluate_case(row: &ManifestRow, opts: &EvaluateOptions) -> Result<CaseEvaluation> {
    let gt = load_label_volume(&row.gt, &opts.label_policy)?;
    let pred = load_label_volume(&row.pred, &opts.label_policy)?;
    gt.grid().ensure_same_geometry(pred.grid())?;
    let mut classes = BTreeMap::new();
    let mut lesions = BTreeMap::new();
    for &label in &opts.classes {
        let g = gt.extract_class(label)?;
        let p = pred.extract_class(label)?;
        let (m, table) = evaluate_class(&g, &p, &opts.metrics)?;
        classes.insert(label, m);
        lesions.insert(label, table);
    }
    Ok(CaseEvaluation {
        metrics: CaseMetrics {
            case_id: row.case_id.clone(),
            config: row.config.clone(),
            fold: row.fold,
            repeat: row.repeat,
            classes,
        },
        lesions,
    })
}

pub fn evaluate_row(row: &ManifestRow, opts: &EvaluateOptions) -> CaseOutcome {
    CaseOutcome {
        row: row.clone(),
        result: evaluate_case(row, opts).map_err(|e| e.to_string()),
    }
}

/// Outcomes in deterministic order, ready for rendering.
#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationReport {
    pub metadata: ReportMetadata,
    pub classes: Vec<u8>,
    pub outcomes: Vec<CaseOutcome>,
}

impl EvaluationReport {
    /// Sorts outcomes by (case, repeat, configuration) so the rendering does
    /// not depend on evaluation order.
    pub fn assemble(mut outcomes: Vec<CaseOutcome>, opts: &EvaluateOptions) -> Self {
        outcomes.sort_by(|a, b| {
            (&a.row.case_id, a.row.repeat, &a.row.config).cmp(&(&b.row.case_id, b.row.repeat, &b.row.config))
        });
        EvaluationReport {
            metadata: ReportMetadata::new(&opts.metrics),
            classes: opts.classes.clone(),
            outcomes,
        }
    }

    pub fn failures(&self) -> usize {
        self.outcomes.iter().filter(|o| o.result.is_err()).count()
    }

    /// One row per (case, repeat, class, configuration); failed cases get a
    /// row per class with status `error` and NaN metrics.
    pub fn to_csv(&self) -> Result<String> {
        let mut out = format!("# {FORMAT_TAG}\n# meta {}\n", serde_json::to_string(&self.metadata)?);
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["case_id", "config", "fold", "repeat", "class", "status"];
        header.extend(METRICS.iter().map(|m| m.0));
        header.extend(COUNTS);
        header.push("error");
        w.write_record(&header)?;
        let mut lines: Vec<((&str, u32, u8, &str), Vec<String>)> = Vec::new();
        for o in &self.outcomes {
            for &label in &self.classes {
                let mut rec = vec![
                    o.row.case_id.clone(),
                    o.row.config.clone(),
                    o.row.fold.to_string(),
                    o.row.repeat.to_string(),
                    class_name(label),
                ];
                match &o.result {
                    Ok(ev) => {
                        let m = &ev.metrics.classes[&label];
                        rec.push("ok".into());
                        rec.extend(METRICS.iter().map(|(c, _)| format_g(metric_value(m, c).unwrap())));
                        let c = m.counts;
                        rec.extend(
                            [c.gt_lesions, c.pred_lesions, c.tp_sensitivity, c.false_negatives, c.tp_precision, c.false_positives]
                                .map(|v| v.to_string()),
                        );
                        rec.push(String::new());
                    }
                    Err(reason) => {
                        rec.push("error".into());
                        rec.extend(METRICS.iter().map(|_| "NaN".to_string()));
                        rec.extend(COUNTS.iter().map(|_| String::new()));
                        rec.push(reason.clone());
                    }
                }
                lines.push(((o.row.case_id.as_str(), o.row.repeat, label, o.row.config.as_str()), rec));
            }
        }
        lines.sort_by(|a, b| a.0.cmp(&b.0));
        for (_, rec) in lines {
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::MetricsTable(e.to_string()))?;
        out.push_str(&String::from_utf8(bytes).expect("csv output is utf-8"));
        Ok(out)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut cases = Vec::new();
        for o in &self.outcomes {
            let mut case = Map::new();
            case.insert("case_id".into(), json!(o.row.case_id));
            case.insert("config".into(), json!(o.row.config));
            case.insert("fold".into(), json!(o.row.fold));
            case.insert("repeat".into(), json!(o.row.repeat));
            match &o.result {
                Ok(ev) => {
                    case.insert("status".into(), json!("ok"));
                    let mut classes = Map::new();
                    for (&label, m) in &ev.metrics.classes {
                        let mut entry = Map::new();
                        for (c, _) in METRICS {
                            entry.insert(c.into(), json_number(metric_value(m, c).unwrap()));
                        }
                        entry.insert("counts".into(), serde_json::to_value(m.counts)?);
                        entry.insert("lesions".into(), serde_json::to_value(&ev.lesions[&label])?);
                        classes.insert(class_name(label), Value::Object(entry));
                    }
                    case.insert("classes".into(), Value::Object(classes));
                }
                Err(reason) => {
                    case.insert("status".into(), json!("error"));
                    case.insert("error".into(), json!(reason));
                }
            }
            cases.push(Value::Object(case));
        }
        let doc = json!({
            "format": FORMAT_TAG,
            "metadata": self.metadata,
            "cases": cases,
        });
        let mut s = serde_json::to_string_pretty(&doc)?;
        s.push('\n');
        Ok(s)
    }
}

impl EvaluationReport {
    /// Lesion match tables of every successful case.
    pub fn match_tables_json(&self) -> Result<String> {
        let mut cases = Vec::new();
        for o in &self.outcomes {
            if let Ok(ev) = &o.result {
                let tables: Map<String, Value> = ev
                    .lesions
                    .iter()
                    .map(|(&l, t)| Ok((class_name(l), serde_json::to_value(t)?)))
                    .collect::<Result<_>>()?;
                cases.push(json!({
                    "case_id": o.row.case_id,
                    "config": o.row.config,
                    "repeat": o.row.repeat,
                    "classes": tables,
                }));
            }
        }
        let mut s = serde_json::to_string_pretty(&json!({ "format": FORMAT_TAG, "cases": cases }))?;
        s.push('\n');
        Ok(s)
    }
}

/// A metric table row read back from CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub case_id: String,
    pub config: String,
    pub fold: u32,
    pub repeat: u32,
    pub class: u8,
    pub ok: bool,
    pub values: BTreeMap<String, f64>,
}

/// A parsed metric table.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricTable {
    pub metadata: ReportMetadata,
    pub rows: Vec<TableRow>,
}

impl MetricTable {
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(&format!("# {FORMAT_TAG}")) {
            return Err(Error::MetricsTable(format!("missing '# {FORMAT_TAG}' header line")));
        }
        let meta = lines
            .next()
            .and_then(|l| l.strip_prefix("# meta "))
            .ok_or_else(|| Error::MetricsTable("missing '# meta' line".into()))?;
        let metadata: ReportMetadata = serde_json::from_str(meta)?;
        let mut rdr = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_reader(text.as_bytes());
        let headers = rdr.headers()?.clone();
        let col = |name: &str| {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::MetricsTable(format!("missing column {name}")))
        };
        let (ci, cc, cf, cr, ccl, cs) = (
            col("case_id")?,
            col("config")?,
            col("fold")?,
            col("repeat")?,
            col("class")?,
            col("status")?,
        );
        let metric_cols: Vec<(&str, usize)> = METRICS
            .iter()
            .map(|(m, _)| col(m).map(|i| (*m, i)))
            .collect::<Result<_>>()?;
        let mut rows = Vec::new();
        let mut seen = BTreeSet::new();
        for rec in rdr.records() {
            let rec = rec?;
            let parse_u32 = |i: usize| {
                rec[i]
                    .parse::<u32>()
                    .map_err(|_| Error::MetricsTable(format!("bad integer {:?}", &rec[i])))
            };
            let class = parse_class_name(&rec[ccl])
                .ok_or_else(|| Error::MetricsTable(format!("bad class {:?}", &rec[ccl])))?;
            let mut values = BTreeMap::new();
            for &(m, i) in &metric_cols {
                let v: f64 = rec[i]
                    .parse()
                    .map_err(|_| Error::MetricsTable(format!("bad value {:?} in column {m}", &rec[i])))?;
                values.insert(m.to_string(), v);
            }
            let row = TableRow {
                case_id: rec[ci].to_string(),
                config: rec[cc].to_string(),
                fold: parse_u32(cf)?,
                repeat: parse_u32(cr)?,
                class,
                ok: &rec[cs] == "ok",
                values,
            };
            if !seen.insert((row.case_id.clone(), row.repeat, row.class, row.config.clone())) {
                return Err(Error::MetricsTable(format!(
                    "duplicate row for case {:?}, repeat {}, class {}",
                    row.case_id,
                    row.repeat,
                    class_name(row.class)
                )));
            }
            rows.push(row);
        }
        Ok(MetricTable { metadata, rows })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn configs(&self) -> BTreeSet<&str> {
        self.rows.iter().map(|r| r.config.as_str()).collect()
    }

    pub fn classes(&self) -> BTreeSet<u8> {
        self.rows.iter().map(|r| r.class).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate, LesionSpec, PhantomSpec};

    fn write_case(dir: &Path, name: &str, lesions: Vec<LesionSpec>) -> PathBuf {
        let spec = PhantomSpec {
            dims: [12, 12, 12],
            spacing: [1.0; 3],
            lesions,
            noise: None,
            seed: 1,
        };
        let p = generate(&spec).unwrap();
        let path = dir.join(format!("{name}.json"));
        crate::io::save_volume(&path, &LoadedVolume::Labels(p.labels), crate::io::Dtype::U8).unwrap();
        path
    }

    fn lesions() -> Vec<LesionSpec> {
        vec![
            LesionSpec { center: [4, 4, 4], radius_mm: 2.0, label: 1 },
            LesionSpec { center: [9, 9, 9], radius_mm: 1.0, label: 2 },
        ]
    }

    #[test]
    fn manifest_parsing_and_validation() {
        let text = "case_id,gt,pred,fold,repeat,config\nc1,gt.json,p.json,0,0,A\nc1,gt.json,p.json,0,1,A\n";
        let m = CaseManifest::from_reader(text.as_bytes(), Path::new("/data")).unwrap();
        assert_eq!(m.rows.len(), 2);
        assert_eq!(m.rows[0].gt, PathBuf::from("/data/gt.json"));
        let dup = "case_id,gt,pred,fold,repeat,config\nc1,a,b,0,0,A\nc1,a,b,0,0,A\n";
        assert!(matches!(CaseManifest::from_reader(dup.as_bytes(), Path::new("")), Err(Error::Manifest(_))));
        let folds = "case_id,gt,pred,fold,repeat,config\nc1,a,b,0,0,A\nc1,a,b,1,1,A\n";
        assert!(matches!(
            CaseManifest::from_reader(folds.as_bytes(), Path::new("")),
            Err(Error::InconsistentFolds(_))
        ));
        let header = "id,gt,pred,fold,repeat,config\n";
        assert!(CaseManifest::from_reader(header.as_bytes(), Path::new("")).is_err());
    }

    #[test]
    fn perfect_case_and_error_row() {
        let dir = tempfile::tempdir().unwrap();
        let gt = write_case(dir.path(), "gt", lesions());
        let rows = vec![
            ManifestRow { case_id: "c1".into(), gt: gt.clone(), pred: gt.clone(), fold: 0, repeat: 0, config: "A".into() },
            ManifestRow {
                case_id: "c0".into(),
                gt: gt.clone(),
                pred: dir.path().join("missing.json"),
                fold: 1,
                repeat: 0,
                config: "A".into(),
            },
        ];
        let opts = EvaluateOptions::default();
        let outcomes = rows.iter().map(|r| evaluate_row(r, &opts)).collect();
        let report = EvaluationReport::assemble(outcomes, &opts);
        assert_eq!(report.failures(), 1);
        let csv = report.to_csv().unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "# lesionmetrics-v1");
        assert_eq!(lines.len(), 3 + 4);
        assert!(lines[3].starts_with("c0,A,1,0,PT,error,NaN"));
        assert!(lines[5].starts_with("c1,A,0,0,PT,ok,1,"));
        let table = MetricTable::parse(&csv).unwrap();
        let ok = table.rows.iter().find(|r| r.case_id == "c1" && r.class == 2).unwrap();
        for (m, v) in [("dice", 1.0), ("sds", 1.0), ("msd", 0.0), ("hd95", 0.0), ("detection_sensitivity", 1.0), ("detection_precision", 1.0)] {
            assert_eq!(ok.values[m], v, "{m}");
        }
        assert!(!table.rows[0].ok);
        let json: Value = serde_json::from_str(&report.to_json().unwrap()).unwrap();
        assert_eq!(json["cases"][0]["status"], "error");
        assert_eq!(json["cases"][1]["classes"]["LN"]["dice"], 1.0);
    }

    #[test]
    fn empty_class_gives_nan() {
        let dir = tempfile::tempdir().unwrap();
        let gt = write_case(dir.path(), "gt", vec![LesionSpec { center: [4, 4, 4], radius_mm: 2.0, label: 1 }]);
        let row = ManifestRow { case_id: "c".into(), gt: gt.clone(), pred: gt, fold: 0, repeat: 0, config: "A".into() };
        let ev = evaluate_case(&row, &EvaluateOptions::default()).unwrap();
        let ln = ev.metrics.classes[&2];
        assert!(ln.dice.is_nan() && ln.hd95.is_nan() && ln.sensitivity.is_nan());
        assert_eq!(ev.metrics.classes[&1].dice, 1.0);
    }

    #[test]
    fn geometry_mismatch_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let gt = write_case(dir.path(), "gt", lesions());
        let other = dir.path().join("small.json");
        let vol = LabelVolume::pt_ln(
            crate::volume::Dims::new(2, 2, 2).unwrap(),
            crate::volume::Spacing::default(),
            vec![0; 8],
        )
        .unwrap();
        crate::io::save_volume(&other, &LoadedVolume::Labels(vol), crate::io::Dtype::U8).unwrap();
        let row = ManifestRow { case_id: "c".into(), gt, pred: other, fold: 0, repeat: 0, config: "A".into() };
        assert!(matches!(evaluate_case(&row, &EvaluateOptions::default()), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn table_rejects_bad_input() {
        assert!(MetricTable::parse("case_id\n").is_err());
        assert!(MetricTable::parse("# lesionmetrics-v1\ncase_id\n").is_err());
    }
}
