//! Long-format CSV ingestion.
//!
//! The file carries `series_id`, `t`, `y` and one column per covariate;
//! a TOML schema descriptor tags every covariate column as historical
//! (`h`), future-known (`f`) or static (`s`).

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CategoricalFeature, Dataset, FeatureLayout, SeriesRecord};
use crate::error::{MqError, Result};

/// Historical indicator column appended by ingestion: 1 where the target
/// was imputed.
pub const MISSING_COLUMN: &str = "__missing";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ColumnTag {
    #[serde(rename = "h")]
    Historical,
    #[serde(rename = "f")]
    Future,
    #[serde(rename = "s")]
    Static,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    #[default]
    Real,
    Categorical,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnSpec {
    pub name: String,
    pub tag: ColumnTag,
    #[serde(default)]
    pub kind: ColumnKind,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemaDescriptor {
    #[serde(default, rename = "column")]
    pub columns: Vec<ColumnSpec>,
}

impl SchemaDescriptor {
    pub fn from_toml(text: &str) -> Result<Self> {
        let schema: SchemaDescriptor = toml::from_str(text).map_err(|e| MqError::Data(format!("schema descriptor: {e}")))?;
        for c in &schema.columns {
            if c.kind == ColumnKind::Categorical && c.tag != ColumnTag::Static {
                return Err(MqError::Data(format!(
                    "column {}: categorical columns must be static",
                    c.name
                )));
            }
            if matches!(c.name.as_str(), "series_id" | "t" | "y" | MISSING_COLUMN) {
                return Err(MqError::Data(format!("column name {} is reserved", c.name)));
            }
        }
        Ok(schema)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("schema serializes")
    }

    fn names(&self, tag: ColumnTag, kind: ColumnKind) -> Vec<String> {
        self.columns
            .iter()
            .filter(|c| c.tag == tag && c.kind == kind)
            .map(|c| c.name.clone())
            .collect()
    }
}

pub fn ingest(path: &Path, schema: &SchemaDescriptor) -> Result<Dataset> {
    let file = std::fs::File::open(path)
        .map_err(|e| MqError::Data(format!("cannot open {}: {e}", path.display())))?;
    ingest_reader(file, schema)
}

struct RawRow {
    t: i64,
    y: Option<f64>,
    cells: Vec<String>,
}

pub fn ingest_reader(reader: impl Read, schema: &SchemaDescriptor) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers()?.clone();
    let pos = |name: &str| header.iter().position(|h| h == name);
    let (Some(id_col), Some(t_col), Some(y_col)) = (pos("series_id"), pos("t"), pos("y")) else {
        return Err(MqError::Data("header must contain series_id, t and y".into()));
    };

    let spec_by_name: BTreeMap<&str, &ColumnSpec> = schema.columns.iter().map(|c| (c.name.as_str(), c)).collect();
    for h in header.iter() {
        if !matches!(h, "series_id" | "t" | "y") && !spec_by_name.contains_key(h) {
            return Err(MqError::Data(format!("column {h} is not declared in the schema")));
        }
    }
    // file position of every declared column, in schema order
    let mut col_pos = Vec::with_capacity(schema.columns.len());
    for c in &schema.columns {
        col_pos.push(pos(&c.name).ok_or_else(|| MqError::Data(format!("schema column {} missing from file", c.name)))?);
    }

    let mut groups: BTreeMap<String, Vec<RawRow>> = BTreeMap::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = line + 2;
        let id = rec.get(id_col).unwrap_or_default().to_string();
        let t_text = rec.get(t_col).unwrap_or_default();
        let t: i64 = t_text
            .parse()
            .map_err(|_| MqError::Data(format!("line {line}: non-monotone time value {t_text:?} (integer steps required)")))?;
        let y_text = rec.get(y_col).unwrap_or_default();
        let y = if y_text.is_empty() {
            None
        } else {
            let v: f64 = y_text
                .parse()
                .map_err(|_| MqError::Data(format!("line {line}: bad target {y_text:?}")))?;
            v.is_finite().then_some(v)
        };
        let cells = col_pos.iter().map(|&p| rec.get(p).unwrap_or_default().to_string()).collect();
        groups.entry(id).or_default().push(RawRow { t, y, cells });
    }

    let hist_real = schema.names(ColumnTag::Historical, ColumnKind::Real);
    let future_real = schema.names(ColumnTag::Future, ColumnKind::Real);
    let static_real = schema.names(ColumnTag::Static, ColumnKind::Real);
    let static_cat = schema.names(ColumnTag::Static, ColumnKind::Categorical);
    let idx_of = |names: &[String]| -> Vec<usize> {
        names
            .iter()
            .map(|n| schema.columns.iter().position(|c| &c.name == n).unwrap())
            .collect()
    };
    let (hi, fi, sri, sci) = (idx_of(&hist_real), idx_of(&future_real), idx_of(&static_real), idx_of(&static_cat));

    let mut series = Vec::with_capacity(groups.len());
    let mut vocab: Vec<Vec<String>> = vec![Vec::new(); static_cat.len()];
    for (id, mut rows) in groups {
        rows.sort_by_key(|r| r.t);
        for w in rows.windows(2) {
            if w[0].t == w[1].t {
                return Err(MqError::Data(format!("duplicate (series_id, t) = ({id}, {})", w[0].t)));
            }
        }
        let start = rows[0].t;
        let len = (rows[rows.len() - 1].t - start + 1) as usize;

        let mut y = Vec::with_capacity(len);
        let mut x_hist = Vec::with_capacity(len);
        let mut x_future = Vec::with_capacity(len);
        let mut last_y = 0.0;
        let mut last_h = vec![0.0; hi.len()];
        let mut last_f = vec![0.0; fi.len()];
        let mut next = rows.iter().peekable();
        for step in 0..len as i64 {
            let t = start + step;
            let row = next.next_if(|r| r.t == t);
            let observed = row.and_then(|r| r.y);
            if let Some(r) = row {
                fill_reals(&r.cells, &hi, &mut last_h, &id, t)?;
                fill_reals(&r.cells, &fi, &mut last_f, &id, t)?;
            }
            let missing = match observed {
                Some(v) => {
                    last_y = v;
                    0.0
                }
                None => 1.0,
            };
            y.push(last_y);
            let mut h = last_h.clone();
            h.push(missing);
            x_hist.push(h);
            x_future.push(last_f.clone());
        }

        let static_value = |col: usize| -> Result<String> {
            let mut value: Option<&str> = None;
            for r in &rows {
                let c = r.cells[col].as_str();
                if c.is_empty() {
                    continue;
                }
                match value {
                    None => value = Some(c),
                    Some(v) if v != c => {
                        return Err(MqError::Data(format!(
                            "series {id}: static column {} changes value ({v} vs {c})",
                            schema.columns[col].name
                        )))
                    }
                    _ => {}
                }
            }
            Ok(value.unwrap_or_default().to_string())
        };
        let mut s_real = Vec::with_capacity(sri.len());
        for &c in &sri {
            let text = static_value(c)?;
            s_real.push(if text.is_empty() {
                0.0
            } else {
                text.parse()
                    .map_err(|_| MqError::Data(format!("series {id}: bad static value {text:?}")))?
            });
        }
        let mut s_cat = Vec::with_capacity(sci.len());
        for (j, &c) in sci.iter().enumerate() {
            let level = static_value(c)?;
            vocab[j].push(level.clone());
            s_cat.push(level);
        }

        series.push(SeriesRecord {
            id,
            start,
            y,
            x_hist,
            x_future,
            static_real: s_real,
            static_cat: s_cat,
        });
    }

    let mut hist = hist_real;
    hist.push(MISSING_COLUMN.to_string());
    let layout = FeatureLayout {
        hist,
        future: future_real,
        static_real,
        static_cat: static_cat
            .into_iter()
            .zip(vocab)
            .map(|(n, levels)| CategoricalFeature::new(n, levels))
            .collect(),
    };
    Dataset::new(layout, series)
}

fn fill_reals(cells: &[String], cols: &[usize], last: &mut [f64], id: &str, t: i64) -> Result<()> {
    for (slot, &c) in last.iter_mut().zip(cols) {
        let text = cells[c].as_str();
        if text.is_empty() {
            continue;
        }
        let v: f64 = text
            .parse()
            .map_err(|_| MqError::Data(format!("series {id}, t={t}: bad value {text:?}")))?;
        if v.is_finite() {
            *slot = v;
        }
    }
    Ok(())
}

/// Writes a dataset back in long format, in schema column order and
/// without the imputation indicator.
pub fn export_csv(dataset: &Dataset, schema: &SchemaDescriptor, writer: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["series_id".to_string(), "t".to_string(), "y".to_string()];
    header.extend(schema.columns.iter().map(|c| c.name.clone()));
    w.write_record(&header)?;
    let layout = &dataset.layout;
    let find = |names: &[String], n: &str| names.iter().position(|x| x == n);
    let cat_names: Vec<String> = layout.static_cat.iter().map(|c| c.name.clone()).collect();
    for s in &dataset.series {
        for i in 0..s.len() {
            let mut rec = vec![s.id.clone(), (s.start + i as i64).to_string(), s.y[i].to_string()];
            for c in &schema.columns {
                let cell = if let Some(j) = find(&layout.hist, &c.name) {
                    s.x_hist[i][j].to_string()
                } else if let Some(j) = find(&layout.future, &c.name) {
                    s.x_future[i][j].to_string()
                } else if let Some(j) = find(&layout.static_real, &c.name) {
                    s.static_real[j].to_string()
                } else if let Some(j) = find(&cat_names, &c.name) {
                    s.static_cat[j].clone()
                } else {
                    return Err(MqError::Data(format!("column {} not in dataset", c.name)));
                };
                rec.push(cell);
            }
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const SCHEMA: &str = r#"
[[column]]
name = "price"
tag = "h"

[[column]]
name = "promo"
tag = "f"

[[column]]
name = "store"
tag = "s"
kind = "categorical"
"#;

    const TOY: &str = "series_id,t,y,price,promo,store
a,1,10,1.5,0,north
a,2,11,1.25,1,north
a,3,12.5,1.5,0,north
b,1,3,2,0,south
b,2,4,2,0,south
";

    fn schema() -> SchemaDescriptor {
        SchemaDescriptor::from_toml(SCHEMA).unwrap()
    }

    #[test]
    fn round_trip_modulo_indicator() {
        let ds = ingest_reader(TOY.as_bytes(), &schema()).unwrap();
        assert_eq!(ds.layout.hist, vec!["price".to_string(), MISSING_COLUMN.to_string()]);
        let mut out = Vec::new();
        export_csv(&ds, &schema(), &mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), TOY);
    }

    #[test]
    fn gap_is_imputed_with_indicator() {
        let text = "series_id,t,y,price,promo,store\na,1,10,1,0,x\na,3,12,1,0,x\n";
        let ds = ingest_reader(text.as_bytes(), &schema()).unwrap();
        let s = &ds.series[0];
        assert_eq!(s.y, vec![10.0, 10.0, 12.0]);
        let miss: Vec<f64> = s.x_hist.iter().map(|r| r[1]).collect();
        assert_eq!(miss, vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn empty_target_cell_is_imputed() {
        let text = "series_id,t,y,price,promo,store\na,1,,1,0,x\na,2,5,1,0,x\n";
        let ds = ingest_reader(text.as_bytes(), &schema()).unwrap();
        assert_eq!(ds.series[0].y, vec![0.0, 5.0]);
        assert_eq!(ds.series[0].x_hist[0][1], 1.0);
    }

    #[test]
    fn duplicate_time_is_error() {
        let text = "series_id,t,y,price,promo,store\na,1,1,1,0,x\na,1,2,1,0,x\n";
        let err = ingest_reader(text.as_bytes(), &schema()).unwrap_err();
        assert!(err.to_string().contains("duplicate"), "{err}");
    }

    #[test]
    fn non_integer_time_is_error() {
        let text = "series_id,t,y,price,promo,store\na,1.5,1,1,0,x\n";
        let err = ingest_reader(text.as_bytes(), &schema()).unwrap_err();
        assert!(err.to_string().contains("non-monotone"), "{err}");
    }

    #[test]
    fn unknown_tag_and_undeclared_column_are_errors() {
        assert!(SchemaDescriptor::from_toml("[[column]]\nname = \"x\"\ntag = \"q\"\n").is_err());
        let text = "series_id,t,y,price,promo,store,extra\na,1,1,1,0,x,9\n";
        assert!(ingest_reader(text.as_bytes(), &schema()).is_err());
    }

    #[test]
    fn changing_static_is_error() {
        let text = "series_id,t,y,price,promo,store\na,1,1,1,0,x\na,2,2,1,0,y\n";
        assert!(ingest_reader(text.as_bytes(), &schema()).is_err());
    }

    #[test]
    fn shuffled_rows_ingest_identically() {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut lines: Vec<String> = Vec::new();
        for s in 0..4 {
            for t in 0..25 {
                if (t * 7 + s) % 11 == 3 {
                    continue; // leave gaps
                }
                lines.push(format!("s{s},{t},{},{},{},{}", t * s, 0.5 * t as f64, t % 3, s % 2));
            }
        }
        let header = "series_id,t,y,price,promo,store";
        let sorted = format!("{header}\n{}\n", lines.join("\n"));
        let reference = ingest_reader(sorted.as_bytes(), &schema()).unwrap();
        for seed in 0..5 {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut shuffled = lines.clone();
            shuffled.shuffle(&mut rng);
            let text = format!("{header}\n{}\n", shuffled.join("\n"));
            assert_eq!(ingest_reader(text.as_bytes(), &schema()).unwrap(), reference);
        }
    }
}
