use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Categorical,
    Continuous,
    Label,
    Sensitive,
    /// Read and validated for arity, never encoded.
    Ignore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnSpec {
    pub name: String,
    pub kind: ColumnKind,
    /// Admissible values. Required for categorical columns; optional for the
    /// label column, where a non-empty list makes unknown labels an error.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub values: Vec<String>,
}

impl ColumnSpec {
    pub fn continuous(name: &str) -> Self {
        Self {
            name: name.to_owned(),
            kind: ColumnKind::Continuous,
            values: Vec::new(),
        }
    }

    pub fn categorical(name: &str, values: &[&str]) -> Self {
        Self {
            name: name.to_owned(),
            kind: ColumnKind::Categorical,
            values: values.iter().map(|s| (*s).to_owned()).collect(),
        }
    }

    pub fn label(name: &str, values: &[&str]) -> Self {
        Self {
            kind: ColumnKind::Label,
            ..Self::categorical(name, values)
        }
    }

    pub fn sensitive(name: &str) -> Self {
        Self {
            name: name.to_owned(),
            kind: ColumnKind::Sensitive,
            values: Vec::new(),
        }
    }
}

/// What happens to rows whose sensitive value is not in `sensitive_groups`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum OtherGroups {
    #[default]
    Drop,
    /// All unlisted values share one extra group id, `sensitive_groups.len()`.
    MapToExtra,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSchema {
    pub columns: Vec<ColumnSpec>,
    /// Label cells equal to any of these map to 1, everything else to 0.
    pub positive_label: Vec<String>,
    /// Sensitive values in group-id order.
    pub sensitive_groups: Vec<String>,
    #[serde(default)]
    pub other_groups: OtherGroups,
    #[serde(default = "default_true")]
    pub has_header: bool,
    #[serde(default = "default_missing")]
    pub missing_token: String,
    #[serde(default = "default_true")]
    pub drop_missing: bool,
}

fn default_true() -> bool {
    true
}

fn default_missing() -> String {
    "?".to_owned()
}

impl DataSchema {
    pub fn new(columns: Vec<ColumnSpec>, positive_label: &[&str], sensitive_groups: &[&str]) -> Self {
        Self {
            columns,
            positive_label: positive_label.iter().map(|s| (*s).to_owned()).collect(),
            sensitive_groups: sensitive_groups.iter().map(|s| (*s).to_owned()).collect(),
            other_groups: OtherGroups::Drop,
            has_header: true,
            missing_token: default_missing(),
            drop_missing: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let count = |k| self.columns.iter().filter(|c| c.kind == k).count();
        if count(ColumnKind::Label) != 1 {
            return Err(Error::Schema(format!(
                "expected exactly one label column, found {}",
                count(ColumnKind::Label)
            )));
        }
        if count(ColumnKind::Sensitive) != 1 {
            return Err(Error::Schema(format!(
                "expected exactly one sensitive column, found {}",
                count(ColumnKind::Sensitive)
            )));
        }
        if self.columns.is_empty() {
            return Err(Error::Schema("no columns".into()));
        }
        for c in &self.columns {
            if c.kind == ColumnKind::Categorical && c.values.is_empty() {
                return Err(Error::Schema(format!(
                    "categorical column `{}` lists no admissible values",
                    c.name
                )));
            }
            if self.columns.iter().filter(|o| o.name == c.name).count() > 1 {
                return Err(Error::Schema(format!("duplicate column `{}`", c.name)));
            }
        }
        if self.positive_label.is_empty() {
            return Err(Error::Schema("positive_label is empty".into()));
        }
        if self.sensitive_groups.is_empty() {
            return Err(Error::Schema("sensitive_groups is empty".into()));
        }
        Ok(())
    }

    pub fn names(&self) -> Vec<String> {
        self.columns.iter().map(|c| c.name.clone()).collect()
    }

    pub fn label_index(&self) -> usize {
        self.index_of(ColumnKind::Label)
    }

    pub fn sensitive_index(&self) -> usize {
        self.index_of(ColumnKind::Sensitive)
    }

    fn index_of(&self, kind: ColumnKind) -> usize {
        self.columns
            .iter()
            .position(|c| c.kind == kind)
            .expect("validated schema")
    }

    /// Number of sensitive groups after the other-groups policy is applied.
    pub fn n_groups(&self) -> usize {
        match self.other_groups {
            OtherGroups::Drop => self.sensitive_groups.len(),
            OtherGroups::MapToExtra => self.sensitive_groups.len() + 1,
        }
    }

    pub fn group_id(&self, value: &str) -> Option<usize> {
        match self.sensitive_groups.iter().position(|g| g == value) {
            Some(i) => Some(i),
            None if self.other_groups == OtherGroups::MapToExtra => Some(self.sensitive_groups.len()),
            None => None,
        }
    }

    /// UCI Adult census income schema: raw files without header, race as the
    /// sensitive attribute restricted to White and Black.
    pub fn adult() -> Self {
        let columns = vec![
            ColumnSpec::continuous("age"),
            ColumnSpec::categorical(
                "workclass",
                &[
                    "Private",
                    "Self-emp-not-inc",
                    "Self-emp-inc",
                    "Federal-gov",
                    "Local-gov",
                    "State-gov",
                    "Without-pay",
                    "Never-worked",
                ],
            ),
            ColumnSpec::continuous("fnlwgt"),
            ColumnSpec::categorical(
                "education",
                &[
                    "Bachelors",
                    "Some-college",
                    "11th",
                    "HS-grad",
                    "Prof-school",
                    "Assoc-acdm",
                    "Assoc-voc",
                    "9th",
                    "7th-8th",
                    "12th",
                    "Masters",
                    "1st-4th",
                    "10th",
                    "Doctorate",
                    "5th-6th",
                    "Preschool",
                ],
            ),
            ColumnSpec::continuous("education-num"),
            ColumnSpec::categorical(
                "marital-status",
                &[
                    "Married-civ-spouse",
                    "Divorced",
                    "Never-married",
                    "Separated",
                    "Widowed",
                    "Married-spouse-absent",
                    "Married-AF-spouse",
                ],
            ),
            ColumnSpec::categorical(
                "occupation",
                &[
                    "Tech-support",
                    "Craft-repair",
                    "Other-service",
                    "Sales",
                    "Exec-managerial",
                    "Prof-specialty",
                    "Handlers-cleaners",
                    "Machine-op-inspct",
                    "Adm-clerical",
                    "Farming-fishing",
                    "Transport-moving",
                    "Priv-house-serv",
                    "Protective-serv",
                    "Armed-Forces",
                ],
            ),
            ColumnSpec::categorical(
                "relationship",
                &["Wife", "Own-child", "Husband", "Not-in-family", "Other-relative", "Unmarried"],
            ),
            ColumnSpec::sensitive("race"),
            ColumnSpec::categorical("sex", &["Female", "Male"]),
            ColumnSpec::continuous("capital-gain"),
            ColumnSpec::continuous("capital-loss"),
            ColumnSpec::continuous("hours-per-week"),
            ColumnSpec::categorical(
                "native-country",
                &[
                    "United-States",
                    "Cambodia",
                    "England",
                    "Puerto-Rico",
                    "Canada",
                    "Germany",
                    "Outlying-US(Guam-USVI-etc)",
                    "India",
                    "Japan",
                    "Greece",
                    "South",
                    "China",
                    "Cuba",
                    "Iran",
                    "Honduras",
                    "Philippines",
                    "Italy",
                    "Poland",
                    "Jamaica",
                    "Vietnam",
                    "Mexico",
                    "Portugal",
                    "Ireland",
                    "France",
                    "Dominican-Republic",
                    "Laos",
                    "Ecuador",
                    "Taiwan",
                    "Haiti",
                    "Columbia",
                    "Hungary",
                    "Guatemala",
                    "Nicaragua",
                    "Scotland",
                    "Thailand",
                    "Yugoslavia",
                    "El-Salvador",
                    "Trinadad&Tobago",
                    "Peru",
                    "Hong",
                    "Holand-Netherlands",
                ],
            ),
            // The test split spells labels with a trailing period.
            ColumnSpec::label("income", &[">50K", "<=50K", ">50K.", "<=50K."]),
        ];
        Self {
            has_header: false,
            ..Self::new(columns, &[">50K", ">50K."], &["White", "Black"])
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adult_schema_is_valid() {
        let s = DataSchema::adult();
        s.validate().unwrap();
        assert_eq!(s.columns.len(), 15);
        assert_eq!(s.columns.iter().filter(|c| c.kind == ColumnKind::Continuous).count(), 6);
        // eight categorical attributes, race among them as the sensitive one
        let cats = s
            .columns
            .iter()
            .filter(|c| matches!(c.kind, ColumnKind::Categorical | ColumnKind::Sensitive))
            .count();
        assert_eq!(cats, 8);
        assert_eq!(s.n_groups(), 2);
    }

    #[test]
    fn rejects_two_label_columns() {
        let s = DataSchema::new(
            vec![
                ColumnSpec::label("y", &[]),
                ColumnSpec::label("y2", &[]),
                ColumnSpec::sensitive("a"),
            ],
            &["1"],
            &["A"],
        );
        assert!(matches!(s.validate(), Err(Error::Schema(_))));
    }

    #[test]
    fn rejects_categorical_without_values() {
        let s = DataSchema::new(
            vec![
                ColumnSpec::categorical("c", &[]),
                ColumnSpec::label("y", &[]),
                ColumnSpec::sensitive("a"),
            ],
            &["1"],
            &["A"],
        );
        assert!(s.validate().is_err());
    }

    #[test]
    fn group_mapping_follows_policy() {
        let mut s = DataSchema::adult();
        assert_eq!(s.group_id("White"), Some(0));
        assert_eq!(s.group_id("Black"), Some(1));
        assert_eq!(s.group_id("Other"), None);
        s.other_groups = OtherGroups::MapToExtra;
        assert_eq!(s.group_id("Other"), Some(2));
        assert_eq!(s.n_groups(), 3);
    }
}
