//! Tab-separated datasets of pre-tokenized ids.
//!
//! One example per line: `label<TAB>ids` for classification and
//! `label<TAB>ids_a<TAB>ids_b` for matching, ids separated by single
//! spaces. The vocabulary size is the largest id plus one and the class
//! count is the largest label plus one (at least 2).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{Dataset, Example, Schema, PAD};
use crate::error::{Error, Result};

fn parse_ids(field: &str, line: usize) -> Result<Vec<u32>> {
    let ids = field
        .split(' ')
        .filter(|s| !s.is_empty())
        .map(|s| {
            let id: u32 = s
                .parse()
                .map_err(|_| Error::data(Some(line), format!("token `{s}` is not a non-negative integer")))?;
            if id == PAD {
                return Err(Error::data(Some(line), "token id 0 is reserved for padding"));
            }
            Ok(id)
        })
        .collect::<Result<Vec<u32>>>()?;
    if ids.is_empty() {
        return Err(Error::data(Some(line), "empty token sequence"));
    }
    Ok(ids)
}

pub fn parse_tsv(text: &str, schema: Schema) -> Result<Dataset> {
    let want_fields = match schema {
        Schema::Classify => 2,
        Schema::Match => 3,
    };
    let mut examples = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let fields: Vec<&str> = raw.split('\t').collect();
        if fields.len() != want_fields {
            return Err(Error::data(
                Some(line),
                format!("expected {want_fields} tab-separated fields, found {}", fields.len()),
            ));
        }
        let label: usize = fields[0]
            .trim()
            .parse()
            .map_err(|_| Error::data(Some(line), format!("label `{}` is not a non-negative integer", fields[0])))?;
        let tokens = parse_ids(fields[1], line)?;
        let pair = if schema == Schema::Match {
            Some(parse_ids(fields[2], line)?)
        } else {
            None
        };
        examples.push(Example { tokens, pair, label });
    }
    if examples.is_empty() {
        return Err(Error::data(None, "no examples"));
    }
    let max_id = examples
        .iter()
        .flat_map(|e| e.tokens.iter().chain(e.pair.iter().flatten()))
        .copied()
        .max()
        .unwrap_or(0);
    let classes = examples.iter().map(|e| e.label).max().unwrap_or(0).max(1) + 1;
    let vocab = (0..=max_id)
        .map(|id| if id == PAD { "<pad>".to_string() } else { id.to_string() })
        .collect();
    Dataset::new(schema, examples, vocab, classes)
}

pub fn load_tsv_dataset(path: &Path, schema: Schema) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_tsv(&text, schema).map_err(|e| match e {
        Error::Data { line, msg } => Error::Parse {
            path: path.to_path_buf(),
            msg: match line {
                Some(l) => format!("line {l}: {msg}"),
                None => msg,
            },
        },
        other => other,
    })
}

pub fn to_tsv(dataset: &Dataset) -> String {
    let join = |ids: &[u32]| ids.iter().map(u32::to_string).collect::<Vec<_>>().join(" ");
    let mut out = String::new();
    for ex in &dataset.examples {
        let _ = write!(out, "{}\t{}", ex.label, join(&ex.tokens));
        if let Some(p) = &ex.pair {
            let _ = write!(out, "\t{}", join(p));
        }
        out.push('\n');
    }
    out
}

pub fn export_tsv(dataset: &Dataset, path: &Path) -> Result<()> {
    fs::write(path, to_tsv(dataset)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_row() {
        let d = parse_tsv("1\t3 4 5\n", Schema::Classify).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d.examples[0].label, 1);
        assert_eq!(d.examples[0].tokens, vec![3, 4, 5]);
        assert_eq!(d.vocab_size(), 6);
    }

    #[test]
    fn bad_token_reports_line() {
        let err = parse_tsv("0\t1 2\n1\t3 x 5\n", Schema::Classify).unwrap_err();
        assert!(matches!(err, Error::Data { line: Some(2), .. }), "{err}");
        let err = parse_tsv("0\t1 2\n1\t3 0\n", Schema::Classify).unwrap_err();
        assert!(matches!(err, Error::Data { line: Some(2), .. }));
        let err = parse_tsv("0\t1 2\n", Schema::Match).unwrap_err();
        assert!(matches!(err, Error::Data { line: Some(1), .. }));
    }

    #[test]
    fn empty_input_is_a_data_error() {
        assert!(matches!(parse_tsv("", Schema::Classify), Err(Error::Data { .. })));
    }

    #[test]
    fn export_then_load_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        for d in [
            crate::data::gen_text_classification(4, 30, 16, 32, 3, 2).unwrap(),
            crate::data::gen_matching(5, 30, 16, 40, 3).unwrap(),
        ] {
            let path = dir.path().join("d.tsv");
            export_tsv(&d, &path).unwrap();
            let back = load_tsv_dataset(&path, d.schema).unwrap();
            assert_eq!(back.examples, d.examples);
            assert_eq!(back.classes, d.classes);
            assert_eq!(to_tsv(&back), to_tsv(&d));
        }
    }

    #[test]
    fn missing_file_names_path() {
        let err = load_tsv_dataset(Path::new("/nonexistent/x.tsv"), Schema::Classify).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/x.tsv"));
    }
}
