//! Integer-encoded categorical tables.
//!
//! Every attribute value is mapped to its position in the declared domain, so
//! codes run `0..|domain|`. The declaration order is the ordinal order: all
//! distances used downstream (sensitivity, pairwise differences, fingerprint
//! density) are measured on these codes. Primary keys are opaque strings and
//! are never rewritten by any operation in the crate.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of bits needed to write `value` in binary, at least 1.
pub fn bit_width(value: u32) -> u32 {
    (u32::BITS - value.leading_zeros()).max(1)
}

/// One categorical attribute and its ordered list of labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeDomain {
    pub name: String,
    pub values: Vec<String>,
}

impl AttributeDomain {
    pub fn new(name: impl Into<String>, values: Vec<String>) -> Result<Self> {
        let domain = Self {
            name: name.into(),
            values,
        };
        domain.validate()?;
        Ok(domain)
    }

    /// Shorthand for building a domain from string literals.
    pub fn from_labels(name: &str, labels: &[&str]) -> Result<Self> {
        Self::new(name, labels.iter().map(|s| s.to_string()).collect())
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::Schema(format!(
                "attribute '{}' declares an empty domain",
                self.name
            )));
        }
        let mut seen = HashSet::new();
        for v in &self.values {
            if !seen.insert(v.as_str()) {
                return Err(Error::Schema(format!(
                    "attribute '{}' declares value '{}' twice",
                    self.name, v
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Largest integer code, `|domain| - 1`.
    pub fn max_code(&self) -> u32 {
        (self.values.len() - 1) as u32
    }

    /// `K_t`: bits needed to encode the largest code.
    pub fn bit_width(&self) -> u32 {
        bit_width(self.max_code())
    }

    pub fn code_of(&self, label: &str) -> Option<u32> {
        self.values.iter().position(|v| v == label).map(|i| i as u32)
    }

    pub fn label_of(&self, code: u32) -> Option<&str> {
        self.values.get(code as usize).map(String::as_str)
    }

    pub fn contains(&self, code: u32) -> bool {
        (code as usize) < self.values.len()
    }
}

/// One tuple: an immutable key, `T` integer codes, and the untouched class label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub primary_key: String,
    pub entries: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SensitivityMode {
    Global,
    Restricted,
}

/// Sensitivity block of the schema sidecar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SensitivityConfig {
    pub mode: SensitivityMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<u32>,
}

impl Default for SensitivityConfig {
    fn default() -> Self {
        Self {
            mode: SensitivityMode::Global,
            delta: None,
        }
    }
}

/// JSON schema sidecar describing a CSV table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub attributes: Vec<AttributeDomain>,
    pub primary_key: String,
    #[serde(default)]
    pub label: Option<String>,
    #[serde(default)]
    pub sensitivity: SensitivityConfig,
}

impl Schema {
    pub fn validate(&self) -> Result<()> {
        if self.attributes.is_empty() {
            return Err(Error::Schema("schema declares no attributes".into()));
        }
        let mut names = HashSet::new();
        names.insert(self.primary_key.as_str());
        if let Some(label) = &self.label {
            if !names.insert(label.as_str()) {
                return Err(Error::Schema(format!(
                    "label column '{label}' collides with the primary key"
                )));
            }
        }
        for attr in &self.attributes {
            attr.validate()?;
            if !names.insert(attr.name.as_str()) {
                return Err(Error::Schema(format!(
                    "column '{}' is declared more than once",
                    attr.name
                )));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let schema: Schema = serde_json::from_str(text)?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Schema(format!("cannot read schema file {}: {e}", path.display()))
        })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Sensitivity `Δ` of neighbouring databases together with how it was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SensitivitySpec {
    pub delta: u32,
    pub mode: SensitivityMode,
}

/// A table of `N` records over `T` categorical attributes.
///
/// Entries are normally within their domains. Fingerprinted copies taken
/// before domain post-processing may carry codes up to `2^{K_t} - 1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelationalDatabase {
    pub domains: Vec<AttributeDomain>,
    pub records: Vec<Record>,
    pub key_column: String,
    pub label_column: Option<String>,
}

impl RelationalDatabase {
    /// Builds a database from already-encoded records, checking keys and shapes.
    pub fn new(
        domains: Vec<AttributeDomain>,
        records: Vec<Record>,
        key_column: impl Into<String>,
        label_column: Option<String>,
    ) -> Result<Self> {
        let db = Self {
            domains,
            records,
            key_column: key_column.into(),
            label_column,
        };
        db.check_integrity()?;
        Ok(db)
    }

    /// Key uniqueness and record width; does not require in-domain codes.
    pub fn check_integrity(&self) -> Result<()> {
        let width = self.domains.len();
        let mut keys = HashSet::with_capacity(self.records.len());
        for r in &self.records {
            if r.entries.len() != width {
                return Err(Error::Integrity(format!(
                    "record '{}' has {} entries, expected {width}",
                    r.primary_key,
                    r.entries.len()
                )));
            }
            if !keys.insert(r.primary_key.as_str()) {
                return Err(Error::Integrity(format!(
                    "duplicate primary key '{}'",
                    r.primary_key
                )));
            }
        }
        Ok(())
    }

    /// Integrity plus every code within its attribute domain.
    pub fn validate(&self) -> Result<()> {
        self.check_integrity()?;
        for r in &self.records {
            for (t, &v) in r.entries.iter().enumerate() {
                if !self.domains[t].contains(v) {
                    return Err(Error::Schema(format!(
                        "record '{}' attribute '{}' holds code {v} outside 0..={}",
                        r.primary_key,
                        self.domains[t].name,
                        self.domains[t].max_code()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// `T`, the number of fingerprintable attributes (the label is not counted).
    pub fn attribute_count(&self) -> usize {
        self.domains.len()
    }

    /// Position of every primary key.
    pub fn key_index(&self) -> HashMap<&str, usize> {
        self.records
            .iter()
            .enumerate()
            .map(|(i, r)| (r.primary_key.as_str(), i))
            .collect()
    }

    /// Same table with an empty record list.
    pub fn empty_like(&self) -> Self {
        Self {
            domains: self.domains.clone(),
            records: Vec::new(),
            key_column: self.key_column.clone(),
            label_column: self.label_column.clone(),
        }
    }

    /// Column `t` as a vector of codes.
    pub fn column(&self, t: usize) -> Vec<u32> {
        self.records.iter().map(|r| r.entries[t]).collect()
    }

    /// Schema sidecar describing this table.
    pub fn schema(&self, sensitivity: SensitivityConfig) -> Schema {
        Schema {
            attributes: self.domains.clone(),
            primary_key: self.key_column.clone(),
            label: self.label_column.clone(),
            sensitivity,
        }
    }

    /// Decodes back to a header and rows of labels.
    ///
    /// Column order is key, attributes in schema order, then the label column.
    pub fn decode(&self) -> Result<(Vec<String>, Vec<Vec<String>>)> {
        let mut header = vec![self.key_column.clone()];
        header.extend(self.domains.iter().map(|d| d.name.clone()));
        if let Some(label) = &self.label_column {
            header.push(label.clone());
        }
        let mut rows = Vec::with_capacity(self.records.len());
        for r in &self.records {
            let mut row = Vec::with_capacity(header.len());
            row.push(r.primary_key.clone());
            for (t, &v) in r.entries.iter().enumerate() {
                let label = self.domains[t].label_of(v).ok_or_else(|| {
                    Error::Schema(format!(
                        "record '{}' attribute '{}' holds code {v} with no label; \
                         apply domain post-processing before decoding",
                        r.primary_key, self.domains[t].name
                    ))
                })?;
                row.push(label.to_string());
            }
            if self.label_column.is_some() {
                row.push(r.label.clone().unwrap_or_default());
            }
            rows.push(row);
        }
        Ok((header, rows))
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let (header, rows) = self.decode()?;
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(&header)?;
        for row in rows {
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv writer emits utf-8"))
    }

    pub fn read_csv<R: Read>(reader: R, schema: &Schema) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        let mut rows = Vec::new();
        for rec in r.records() {
            rows.push(rec?.iter().map(str::to_string).collect());
        }
        encode_database(&header, &rows, schema)
    }

    pub fn load_csv(path: &Path, schema: &Schema) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| {
            Error::Schema(format!("cannot open table {}: {e}", path.display()))
        })?;
        Self::read_csv(std::io::BufReader::new(file), schema)
    }
}

/// Encodes a raw text table against the schema.
///
/// Columns are matched by header name; columns not named in the schema are
/// rejected so that nothing silently escapes fingerprinting.
pub fn encode_database(
    header: &[String],
    rows: &[Vec<String>],
    schema: &Schema,
) -> Result<RelationalDatabase> {
    schema.validate()?;
    let find = |name: &str| -> Result<usize> {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("column '{name}' missing from table header")))
    };
    let key_col = find(&schema.primary_key)?;
    let attr_cols = schema
        .attributes
        .iter()
        .map(|a| find(&a.name))
        .collect::<Result<Vec<_>>>()?;
    let label_col = schema.label.as_deref().map(find).transpose()?;
    let expected = 1 + attr_cols.len() + usize::from(label_col.is_some());
    if header.len() != expected {
        let known: HashSet<&str> = std::iter::once(schema.primary_key.as_str())
            .chain(schema.attributes.iter().map(|a| a.name.as_str()))
            .chain(schema.label.as_deref())
            .collect();
        let extra: Vec<&str> = header
            .iter()
            .map(String::as_str)
            .filter(|h| !known.contains(h))
            .collect();
        return Err(Error::Schema(format!(
            "table has columns not declared in the schema: {extra:?}"
        )));
    }

    let mut records = Vec::with_capacity(rows.len());
    let mut keys = HashSet::with_capacity(rows.len());
    for (line, row) in rows.iter().enumerate() {
        if row.len() != header.len() {
            return Err(Error::Schema(format!(
                "row {} has {} cells, header has {}",
                line + 1,
                row.len(),
                header.len()
            )));
        }
        let key = row[key_col].clone();
        if !keys.insert(key.clone()) {
            return Err(Error::Integrity(format!("duplicate primary key '{key}'")));
        }
        let entries = schema
            .attributes
            .iter()
            .zip(&attr_cols)
            .map(|(attr, &col)| {
                attr.code_of(&row[col]).ok_or_else(|| {
                    Error::Schema(format!(
                        "row {} (key '{key}'): '{}' is not a declared value of '{}'",
                        line + 1,
                        row[col],
                        attr.name
                    ))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        records.push(Record {
            primary_key: key,
            entries,
            label: label_col.map(|c| row[c].clone()),
        });
    }
    Ok(RelationalDatabase {
        domains: schema.attributes.clone(),
        records,
        key_column: schema.primary_key.clone(),
        label_column: schema.label.clone(),
    })
}

/// Largest code over all attributes, floored at 1.
pub fn global_sensitivity(domains: &[AttributeDomain]) -> u32 {
    domains.iter().map(AttributeDomain::max_code).max().unwrap_or(0).max(1)
}

/// Sensitivity `Δ` for the database under the requested mode.
///
/// Global mode returns the largest code over all attributes. Restricted mode
/// takes a user-supplied `Δ` that may only be tighter than the global value.
pub fn compute_sensitivity(
    db: &RelationalDatabase,
    mode: SensitivityMode,
    override_delta: Option<u32>,
) -> Result<SensitivitySpec> {
    let global = global_sensitivity(&db.domains);
    match (mode, override_delta) {
        (_, Some(0)) => Err(Error::Parameter("sensitivity override must be positive".into())),
        (_, Some(d)) if d > global => Err(Error::Parameter(format!(
            "sensitivity override {d} exceeds the global sensitivity {global}"
        ))),
        (SensitivityMode::Global, None) => Ok(SensitivitySpec {
            delta: global,
            mode,
        }),
        (SensitivityMode::Global, Some(d)) if d == global => Ok(SensitivitySpec {
            delta: d,
            mode,
        }),
        (SensitivityMode::Global, Some(_)) | (SensitivityMode::Restricted, Some(_)) => {
            Ok(SensitivitySpec {
                delta: override_delta.unwrap(),
                mode: SensitivityMode::Restricted,
            })
        }
        (SensitivityMode::Restricted, None) => Err(Error::Parameter(
            "restricted sensitivity requires an explicit delta".into(),
        )),
    }
}

/// Sensitivity as declared by the schema sidecar.
pub fn schema_sensitivity(db: &RelationalDatabase, schema: &Schema) -> Result<SensitivitySpec> {
    compute_sensitivity(db, schema.sensitivity.mode, schema.sensitivity.delta)
}

/// Copy of `db` differing only in entry `(row, attribute)`.
pub fn make_neighbor(
    db: &RelationalDatabase,
    row: usize,
    attribute: usize,
    new_value: u32,
    delta: u32,
) -> Result<RelationalDatabase> {
    let record = db
        .records
        .get(row)
        .ok_or_else(|| Error::Precondition(format!("row {row} out of range")))?;
    let domain = db
        .domains
        .get(attribute)
        .ok_or_else(|| Error::Precondition(format!("attribute {attribute} out of range")))?;
    if !domain.contains(new_value) {
        return Err(Error::Precondition(format!(
            "value {new_value} outside the domain of '{}'",
            domain.name
        )));
    }
    let old = record.entries[attribute];
    if old.abs_diff(new_value) > delta {
        return Err(Error::Precondition(format!(
            "change {old} -> {new_value} exceeds sensitivity {delta}"
        )));
    }
    let mut out = db.clone();
    out.records[row].entries[attribute] = new_value;
    Ok(out)
}

/// Fractions of pairwise absolute code differences, grouped by class label.
///
/// For each class and each attribute, all ordered pairs of records in the
/// class (self-pairs included) contribute one absolute difference. The
/// returned vector for a class is indexed by the difference value and sums
/// to 1. Records without a label are grouped under `"*"`.
pub fn pairwise_diff_fractions(db: &RelationalDatabase) -> Result<BTreeMap<String, Vec<f64>>> {
    if db.is_empty() {
        return Err(Error::Precondition("pairwise differences of an empty table".into()));
    }
    let width = db
        .domains
        .iter()
        .map(|d| d.len())
        .max()
        .unwrap_or(1)
        .max(db.records.iter().flat_map(|r| r.entries.iter()).map(|&v| v as usize + 1).max().unwrap_or(1));

    // class -> attribute -> histogram of codes
    let mut hist: BTreeMap<String, Vec<Vec<u64>>> = BTreeMap::new();
    for r in &db.records {
        let class = r.label.clone().unwrap_or_else(|| "*".to_string());
        let h = hist
            .entry(class)
            .or_insert_with(|| vec![vec![0u64; width]; db.domains.len()]);
        for (t, &v) in r.entries.iter().enumerate() {
            h[t][v as usize] += 1;
        }
    }

    let mut out = BTreeMap::new();
    for (class, per_attr) in hist {
        let mut counts = vec![0u128; width];
        for h in &per_attr {
            for (a, &ca) in h.iter().enumerate() {
                if ca == 0 {
                    continue;
                }
                for (b, &cb) in h.iter().enumerate() {
                    counts[a.abs_diff(b)] += u128::from(ca) * u128::from(cb);
                }
            }
        }
        let total: u128 = counts.iter().sum();
        let mut fractions: Vec<f64> = counts.iter().map(|&c| c as f64 / total as f64).collect();
        while fractions.len() > 1 && *fractions.last().unwrap() == 0.0 {
            fractions.pop();
        }
        out.insert(class, fractions);
    }
    Ok(out)
}
