//! Dataset ingestion from TSV (GLUE layout) and JSONL.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use veil_core::{Instance, LabelSet};

use crate::error::HarnessError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetFormat {
    Tsv,
    Jsonl,
}

impl std::str::FromStr for DatasetFormat {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tsv" => Ok(Self::Tsv),
            "jsonl" => Ok(Self::Jsonl),
            other => Err(HarnessError::Config(format!("unknown dataset format '{other}'"))),
        }
    }
}

/// Where each field lives: TSV header names (or zero-based indices when
/// `header` is false), or JSONL keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Columns {
    pub id: Option<String>,
    pub text: String,
    /// Second sentence of pair tasks.
    pub text_pair: Option<String>,
    pub label: Option<String>,
    pub header: bool,
}

impl Default for Columns {
    fn default() -> Self {
        Self {
            id: None,
            text: "text".into(),
            text_pair: None,
            label: Some("label".into()),
            header: true,
        }
    }
}

impl Columns {
    /// GLUE column names for the reference tasks.
    pub fn preset(name: &str) -> Option<Self> {
        let c = |text: &str, pair: Option<&str>, label: &str| Columns {
            id: None,
            text: text.into(),
            text_pair: pair.map(String::from),
            label: Some(label.into()),
            header: true,
        };
        match name {
            "sst2" | "sst5" => Some(c("sentence", None, "label")),
            "mrpc" => Some(c("#1 String", Some("#2 String"), "Quality")),
            "qnli" => Some(c("question", Some("sentence"), "label")),
            _ => None,
        }
    }
}

/// Reads instances with stable ids `x0, x1, ...` unless an id column is
/// given. Sentence pairs are joined as `a <separator> b`. Labels may be
/// indices or label names.
pub fn ingest(
    path: &Path,
    format: DatasetFormat,
    columns: &Columns,
    labels: &LabelSet,
    separator: &str,
) -> Result<Vec<Instance>, HarnessError> {
    let rows = match format {
        DatasetFormat::Tsv => read_tsv(path, columns)?,
        DatasetFormat::Jsonl => read_jsonl(path, columns)?,
    };
    let mut out = Vec::with_capacity(rows.len());
    for (i, row) in rows.into_iter().enumerate() {
        let err = |msg: String| HarnessError::Parse {
            path: path.to_owned(),
            line: row.line,
            msg,
        };
        let text = match &row.pair {
            Some(b) => format!("{} {separator} {}", row.text.trim(), b.trim()),
            None => row.text.trim().to_owned(),
        };
        if row.text.trim().is_empty() {
            return Err(err("empty text".into()));
        }
        let gold = match row.label {
            Some(l) => Some(parse_label(&l, labels).ok_or_else(|| err(format!("unknown label '{l}'")))?),
            None => None,
        };
        let id = row.id.unwrap_or_else(|| format!("x{i}"));
        out.push(Instance::new(id, text, gold).map_err(|e| err(e.to_string()))?);
    }
    if out.is_empty() {
        return Err(HarnessError::Parse {
            path: path.to_owned(),
            line: 0,
            msg: "no instances".into(),
        });
    }
    Ok(out)
}

/// Reads an unlabeled obfuscator corpus: JSONL objects with `text` and an
/// optional `id`, or two-column `id<TAB>text` TSV with an optional
/// `id\ttext` header line.
pub fn ingest_candidates(path: &Path, format: DatasetFormat, separator: &str) -> Result<Vec<Instance>, HarnessError> {
    let columns = match format {
        DatasetFormat::Tsv => Columns {
            id: Some("0".into()),
            text: "1".into(),
            text_pair: None,
            label: None,
            header: false,
        },
        DatasetFormat::Jsonl => Columns {
            id: Some("id".into()),
            label: None,
            ..Columns::default()
        },
    };
    let mut out = ingest(path, format, &columns, &LabelSet::numbered(2)?, separator)?;
    if format == DatasetFormat::Tsv && out[0].id.0 == "id" && out[0].text == "text" {
        out.remove(0);
    }
    if out.is_empty() {
        return Err(HarnessError::Parse {
            path: path.to_owned(),
            line: 0,
            msg: "no candidates".into(),
        });
    }
    Ok(out)
}

fn parse_label(raw: &str, labels: &LabelSet) -> Option<usize> {
    let raw = raw.trim();
    if let Some(i) = labels.index_of(raw) {
        return Some(i);
    }
    raw.parse::<usize>().ok().filter(|i| *i < labels.len())
}

struct Row {
    line: usize,
    id: Option<String>,
    text: String,
    pair: Option<String>,
    label: Option<String>,
}

fn read_tsv(path: &Path, columns: &Columns) -> Result<Vec<Row>, HarnessError> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .quoting(false)
        .has_headers(columns.header)
        .from_path(path)
        .map_err(|e| HarnessError::io(path, std::io::Error::other(e)))?;
    let header: Vec<String> = if columns.header {
        reader
            .headers()
            .map_err(|e| csv_error(path, e))?
            .iter()
            .map(String::from)
            .collect()
    } else {
        Vec::new()
    };
    let find = |name: &str| -> Result<usize, HarnessError> {
        let pos = if columns.header {
            header.iter().position(|h| h == name)
        } else {
            name.parse().ok()
        };
        pos.ok_or_else(|| HarnessError::Parse {
            path: path.to_owned(),
            line: 1,
            msg: format!("no column '{name}'"),
        })
    };
    let text = find(&columns.text)?;
    let pair = columns.text_pair.as_deref().map(find).transpose()?;
    let label = columns.label.as_deref().map(find).transpose()?;
    let id = columns.id.as_deref().map(find).transpose()?;

    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let get = |i: usize| -> Result<String, HarnessError> {
            record.get(i).map(String::from).ok_or_else(|| HarnessError::Parse {
                path: path.to_owned(),
                line,
                msg: format!("missing field {i}"),
            })
        };
        rows.push(Row {
            line,
            id: id.map(get).transpose()?,
            text: get(text)?,
            pair: pair.map(get).transpose()?,
            label: label.map(get).transpose()?,
        });
    }
    Ok(rows)
}

fn csv_error(path: &Path, e: csv::Error) -> HarnessError {
    let line = e.position().map_or(0, |p| p.line() as usize);
    HarnessError::Parse {
        path: path.to_owned(),
        line,
        msg: e.to_string(),
    }
}

fn read_jsonl(path: &Path, columns: &Columns) -> Result<Vec<Row>, HarnessError> {
    let file = File::open(path).map_err(|e| HarnessError::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| HarnessError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| HarnessError::Parse {
            path: path.to_owned(),
            line: line_no,
            msg,
        };
        let value: Value = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        let obj = value.as_object().ok_or_else(|| err("expected a JSON object".into()))?;
        let field = |key: &str| -> Result<Option<String>, HarnessError> {
            match obj.get(key) {
                None | Some(Value::Null) => Ok(None),
                Some(Value::String(s)) => Ok(Some(s.clone())),
                Some(Value::Number(n)) => Ok(Some(n.to_string())),
                Some(other) => Err(err(format!("field '{key}' has unsupported value {other}"))),
            }
        };
        let text = field(&columns.text)?.ok_or_else(|| err(format!("missing '{}'", columns.text)))?;
        let pair = match &columns.text_pair {
            Some(k) => Some(field(k)?.ok_or_else(|| err(format!("missing '{k}'")))?),
            None => None,
        };
        rows.push(Row {
            line: line_no,
            id: columns.id.as_deref().map(field).transpose()?.flatten(),
            text,
            pair,
            label: columns.label.as_deref().map(field).transpose()?.flatten(),
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn file(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    fn binary() -> LabelSet {
        LabelSet::new(["negative", "positive"]).unwrap()
    }

    #[test]
    fn two_line_tsv() {
        let f = file("sentence\tlabel\na fine film\t1\ndull \"and\" slow\t0\n");
        let cols = Columns::preset("sst2").unwrap();
        let xs = ingest(f.path(), DatasetFormat::Tsv, &cols, &binary(), "[SEP]").unwrap();
        assert_eq!(xs.len(), 2);
        assert_eq!(xs[0].id.0, "x0");
        assert_eq!(xs[1].text, "dull \"and\" slow");
        assert_eq!(xs[1].gold_label, Some(0));
    }

    #[test]
    fn jsonl_with_label_names() {
        let f = file("{\"text\": \"good\", \"label\": \"positive\"}\n\n{\"text\": \"bad\", \"label\": 0}\n");
        let xs = ingest(f.path(), DatasetFormat::Jsonl, &Columns::default(), &binary(), "[SEP]").unwrap();
        assert_eq!(xs.iter().map(|x| x.gold_label).collect::<Vec<_>>(), [Some(1), Some(0)]);
    }

    #[test]
    fn mrpc_pairs_are_joined() {
        let f = file(
            "Quality\t#1 ID\t#2 ID\t#1 String\t#2 String\n1\t11\t12\tHe said so .\tHe stated it .\n0\t13\t14\tA b\tC d\n",
        );
        let cols = Columns::preset("mrpc").unwrap();
        let labels = LabelSet::new(["not_equivalent", "equivalent"]).unwrap();
        let xs = ingest(f.path(), DatasetFormat::Tsv, &cols, &labels, "[SEP]").unwrap();
        assert_eq!(xs[0].text, "He said so . [SEP] He stated it .");
        assert_eq!(xs[0].gold_label, Some(1));
        assert_eq!(xs[1].text, "A b [SEP] C d");
    }

    #[test]
    fn errors_carry_line_numbers() {
        let f = file("sentence\tlabel\nok\t1\nbroken row\n");
        let cols = Columns::preset("sst2").unwrap();
        match ingest(f.path(), DatasetFormat::Tsv, &cols, &binary(), "[SEP]") {
            Err(HarnessError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let f = file("{\"text\": \"a\", \"label\": 1}\n{\"text\": \"b\", \"label\": 7}\n");
        match ingest(f.path(), DatasetFormat::Jsonl, &Columns::default(), &binary(), "[SEP]") {
            Err(HarnessError::Parse { line, msg, .. }) => {
                assert_eq!(line, 2);
                assert!(msg.contains("unknown label"));
            }
            other => panic!("{other:?}"),
        }
        let f = file("{\"text\": \"a\"}\nnot json\n");
        assert!(matches!(
            ingest(f.path(), DatasetFormat::Jsonl, &Columns::default(), &binary(), "[SEP]"),
            Err(HarnessError::Parse { line: 2, .. })
        ));
        let f = file("{\"text\": \"  \"}\n");
        assert!(matches!(
            ingest(f.path(), DatasetFormat::Jsonl, &Columns::default(), &binary(), "[SEP]"),
            Err(HarnessError::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn candidate_corpora() {
        let f = file("id\ttext\nc1\ta calm film\nc2\tloud\n");
        let got = ingest_candidates(f.path(), DatasetFormat::Tsv, "[SEP]").unwrap();
        assert_eq!(got.len(), 2);
        assert_eq!((got[1].id.0.as_str(), got[1].text.as_str(), got[1].gold_label), ("c2", "loud", None));
        let f = file("{\"id\": \"a\", \"text\": \"one two\"}\n{\"text\": \"three\"}\n");
        let got = ingest_candidates(f.path(), DatasetFormat::Jsonl, "[SEP]").unwrap();
        assert_eq!(got[0].id.0, "a");
        assert_eq!(got[1].id.0, "x1");
        let f = file("id\ttext\n");
        assert!(ingest_candidates(f.path(), DatasetFormat::Tsv, "[SEP]").is_err());
    }

    #[test]
    fn headerless_tsv_by_index() {
        let f = file("hello there\t1\n");
        let cols = Columns {
            text: "0".into(),
            label: Some("1".into()),
            header: false,
            ..Columns::default()
        };
        let xs = ingest(f.path(), DatasetFormat::Tsv, &cols, &binary(), "[SEP]").unwrap();
        assert_eq!(xs[0].gold_label, Some(1));
    }
}
