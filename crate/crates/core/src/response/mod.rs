//! The analytic specification returned by the model: parsing, structural
//! validation against the dataset and the task taxonomy, and a single
//! corrective round-trip when validation fails.

mod repair;
mod validate;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

pub use repair::{evaluate_reply, repair, repair_prompt, Attempt, RepairError, Repaired};
pub use validate::{
    normalize_title, validate, validate_ambiguity_coverage, Finding, FindingCode, Severity, ValidationReport, Verdict,
};

/// Marks accepted by the structural Vega-Lite check.
pub const MARK_VOCABULARY: [&str; 8] = ["bar", "line", "point", "tick", "arc", "area", "boxplot", "circle"];

/// Encoding channels accepted by the structural Vega-Lite check.
pub const CHANNEL_VOCABULARY: [&str; 7] = ["x", "y", "color", "size", "row", "column", "theta"];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParseError {
    #[error("malformed response JSON: {0}")]
    MalformedJson(String),
}

fn is_false(b: &bool) -> bool {
    !*b
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AttributeMapping {
    #[serde(default, deserialize_with = "phrase")]
    pub query_phrase: String,
    #[serde(default, skip_serializing_if = "is_false")]
    pub is_derived: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub derivation_note: Option<String>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

/// Accepts a phrase string or a list of phrases (joined with ", ").
fn phrase<'de, D: serde::Deserializer<'de>>(d: D) -> Result<String, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Phrase {
        One(String),
        Many(Vec<String>),
        Null(()),
    }
    Ok(match Phrase::deserialize(d)? {
        Phrase::One(s) => s,
        Phrase::Many(v) => v.join(", "),
        Phrase::Null(()) => String::new(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TaskEntry {
    #[serde(default)]
    pub attributes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub operator: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub values: Option<Vec<Value>>,
    /// `explicit` or `implicit` when the model reports it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inference_type: Option<String>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

/// One encoding channel as read from a Vega-Lite spec.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Encoding {
    pub field: Option<String>,
    /// Raw Vega-Lite `type`; checked against the four datatypes by the validator.
    pub datatype: Option<String>,
    pub aggregate: Option<String>,
    pub axis_title: Option<String>,
}

/// A `visList` entry. The Vega-Lite JSON is kept verbatim in `vl_spec`; the
/// other fields are views extracted from it (plus the entry's bookkeeping).
#[derive(Debug, Clone, PartialEq)]
pub struct VisSpec {
    pub mark: String,
    pub encodings: IndexMap<String, Encoding>,
    pub transforms: Vec<Value>,
    pub data_url: Option<String>,
    pub serves_attributes: Vec<String>,
    pub serves_tasks: Vec<String>,
    pub vl_spec: Value,
    pub extra: Map<String, Value>,
}

impl VisSpec {
    /// Builds the view over a Vega-Lite object. Never fails; anything the
    /// structural check cares about is surfaced as an empty or odd value.
    pub fn from_vega_lite(vl_spec: Value, serves_attributes: Vec<String>, serves_tasks: Vec<String>) -> Self {
        let mark = match vl_spec.get("mark") {
            Some(Value::String(m)) => m.clone(),
            Some(Value::Object(o)) => o.get("type").and_then(Value::as_str).unwrap_or_default().to_string(),
            _ => String::new(),
        };
        let encodings = vl_spec
            .get("encoding")
            .and_then(Value::as_object)
            .map(|enc| enc.iter().map(|(channel, def)| (channel.clone(), encoding_from(def))).collect())
            .unwrap_or_default();
        let transforms = vl_spec.get("transform").and_then(Value::as_array).cloned().unwrap_or_default();
        let data_url = vl_spec.pointer("/data/url").and_then(Value::as_str).map(str::to_string);
        VisSpec { mark, encodings, transforms, data_url, serves_attributes, serves_tasks, vl_spec, extra: Map::new() }
    }

    /// Field names introduced by transforms (`"as"` outputs).
    pub fn transform_outputs(&self) -> Vec<String> {
        let mut out = Vec::new();
        for t in &self.transforms {
            collect_as(t, &mut out);
        }
        out
    }

    pub fn references(&self, attribute: &str) -> bool {
        self.encodings.values().any(|e| e.field.as_deref() == Some(attribute))
    }

    fn from_wire(v: Value) -> Result<Self, ParseError> {
        let Value::Object(mut obj) = v else {
            return Err(ParseError::MalformedJson("visList entries must be objects".into()));
        };
        let strings = |v: Option<Value>| -> Vec<String> {
            match v {
                Some(Value::Array(a)) => a.into_iter().filter_map(|x| x.as_str().map(str::to_string)).collect(),
                Some(Value::String(s)) => vec![s],
                _ => Vec::new(),
            }
        };
        if !obj.contains_key("vlSpec") {
            // A bare Vega-Lite spec was listed directly.
            return Ok(VisSpec::from_vega_lite(Value::Object(obj), Vec::new(), Vec::new()));
        }
        let vl = obj.shift_remove("vlSpec").unwrap_or(Value::Null);
        let attrs = strings(obj.shift_remove("attributes"));
        let tasks = strings(obj.shift_remove("tasks"));
        let mut spec = VisSpec::from_vega_lite(vl, attrs, tasks);
        spec.extra = obj;
        Ok(spec)
    }

    fn to_wire(&self) -> Value {
        let mut obj = Map::new();
        obj.insert("attributes".into(), self.serves_attributes.clone().into());
        obj.insert("tasks".into(), self.serves_tasks.clone().into());
        obj.insert("vlSpec".into(), self.vl_spec.clone());
        for (k, v) in &self.extra {
            obj.insert(k.clone(), v.clone());
        }
        Value::Object(obj)
    }
}

fn encoding_from(def: &Value) -> Encoding {
    let s = |v: Option<&Value>| v.and_then(Value::as_str).map(str::to_string);
    Encoding {
        field: s(def.get("field")),
        datatype: s(def.get("type")),
        aggregate: s(def.get("aggregate")),
        axis_title: s(def.get("title"))
            .or_else(|| s(def.pointer("/axis/title")))
            .or_else(|| s(def.pointer("/legend/title"))),
    }
}

fn collect_as(v: &Value, out: &mut Vec<String>) {
    match v {
        Value::Object(o) => {
            for (k, val) in o {
                if k == "as" {
                    match val {
                        Value::String(s) => out.push(s.clone()),
                        Value::Array(a) => out.extend(a.iter().filter_map(Value::as_str).map(str::to_string)),
                        _ => {}
                    }
                } else {
                    collect_as(val, out);
                }
            }
        }
        Value::Array(a) => a.iter().for_each(|x| collect_as(x, out)),
        _ => {}
    }
}

impl Serialize for VisSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_wire().serialize(s)
    }
}

impl<'de> Deserialize<'de> for VisSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        VisSpec::from_wire(Value::deserialize(d)?).map_err(serde::de::Error::custom)
    }
}

/// The response contract: attribute map, task map and visualization list.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticSpecification {
    pub attribute_map: IndexMap<String, AttributeMapping>,
    pub task_map: IndexMap<String, Vec<TaskEntry>>,
    pub vis_list: Vec<VisSpec>,
    /// Prose around the JSON object (explanation mode).
    pub explanation: Option<String>,
    pub extra: Map<String, Value>,
}

const REQUIRED_KEYS: [&str; 3] = ["attributeMap", "taskMap", "visList"];

impl AnalyticSpecification {
    pub fn from_value(v: Value) -> Result<Self, ParseError> {
        let Value::Object(mut obj) = v else {
            return Err(ParseError::MalformedJson("top level is not an object".into()));
        };
        let missing: Vec<&str> = REQUIRED_KEYS.into_iter().filter(|k| !obj.contains_key(*k)).collect();
        if !missing.is_empty() {
            return Err(ParseError::MalformedJson(format!("missing {}", missing.join(", "))));
        }
        let bad = |what: &str, e: serde_json::Error| ParseError::MalformedJson(format!("{what}: {e}"));

        let attribute_map = serde_json::from_value(obj.shift_remove("attributeMap").unwrap_or_default())
            .map_err(|e| bad("attributeMap", e))?;

        let task_map_value = obj.shift_remove("taskMap").unwrap_or_default();
        let Value::Object(raw_tasks) = task_map_value else {
            return Err(ParseError::MalformedJson("taskMap is not an object".into()));
        };
        let mut task_map = IndexMap::new();
        for (task, entries) in raw_tasks {
            let entries = match entries {
                Value::Array(a) => a,
                single @ Value::Object(_) => vec![single],
                _ => return Err(ParseError::MalformedJson(format!("taskMap.{task} is not a list"))),
            };
            let entries: Vec<TaskEntry> = entries
                .into_iter()
                .map(serde_json::from_value)
                .collect::<Result<_, _>>()
                .map_err(|e| bad(&format!("taskMap.{task}"), e))?;
            task_map.insert(task, entries);
        }

        let Value::Array(raw_vis) = obj.shift_remove("visList").unwrap_or_default() else {
            return Err(ParseError::MalformedJson("visList is not an array".into()));
        };
        let vis_list = raw_vis.into_iter().map(VisSpec::from_wire).collect::<Result<_, _>>()?;

        let explanation = match obj.shift_remove("explanation") {
            Some(Value::String(s)) => Some(s),
            Some(other) => {
                obj.insert("explanation".into(), other);
                None
            }
            None => None,
        };

        Ok(AnalyticSpecification { attribute_map, task_map, vis_list, explanation, extra: obj })
    }

    fn to_value(&self, with_explanation: bool) -> Value {
        let mut obj = Map::new();
        obj.insert("attributeMap".into(), serde_json::to_value(&self.attribute_map).expect("attribute map serializes"));
        obj.insert("taskMap".into(), serde_json::to_value(&self.task_map).expect("task map serializes"));
        obj.insert("visList".into(), Value::Array(self.vis_list.iter().map(VisSpec::to_wire).collect()));
        for (k, v) in &self.extra {
            obj.insert(k.clone(), v.clone());
        }
        if with_explanation {
            if let Some(e) = &self.explanation {
                obj.insert("explanation".into(), Value::String(e.clone()));
            }
        }
        Value::Object(obj)
    }

    /// The response-JSON shape without the explanation, pretty-printed.
    /// This is what a follow-up prompt embeds.
    pub fn to_response_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_value(false)).expect("specification serializes")
    }

    pub fn derived_attributes(&self) -> impl Iterator<Item = (&String, &AttributeMapping)> {
        self.attribute_map.iter().filter(|(_, m)| m.is_derived)
    }
}

impl Serialize for AnalyticSpecification {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_value(true).serialize(s)
    }
}

impl<'de> Deserialize<'de> for AnalyticSpecification {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        AnalyticSpecification::from_value(Value::deserialize(d)?).map_err(serde::de::Error::custom)
    }
}

/// Byte ranges of balanced `{...}` regions, in order of their opening brace.
/// Braces inside JSON strings are ignored.
fn balanced_objects(text: &str) -> Vec<(usize, usize)> {
    let bytes = text.as_bytes();
    let mut found = Vec::new();
    for start in (0..bytes.len()).filter(|&i| bytes[i] == b'{') {
        let mut depth = 0usize;
        let mut in_string = false;
        let mut escaped = false;
        for (i, &b) in bytes.iter().enumerate().skip(start) {
            if in_string {
                match b {
                    _ if escaped => escaped = false,
                    b'\\' => escaped = true,
                    b'"' => in_string = false,
                    _ => {}
                }
                continue;
            }
            match b {
                b'"' => in_string = true,
                b'{' => depth += 1,
                b'}' => {
                    depth -= 1;
                    if depth == 0 {
                        found.push((start, i + 1));
                        break;
                    }
                }
                _ => {}
            }
        }
    }
    found
}

fn strip_fences(prose: &str) -> String {
    prose.lines().filter(|l| !l.trim_start().starts_with("```")).collect::<Vec<_>>().join("\n").trim().to_string()
}

/// Parses raw model output. A bare JSON object is parsed directly; otherwise
/// the first balanced `{...}` region holding a well-formed specification is
/// used and the surrounding prose becomes the explanation.
pub fn parse(raw: &str) -> Result<AnalyticSpecification, ParseError> {
    let trimmed = raw.trim();
    if let Ok(v @ Value::Object(_)) = serde_json::from_str::<Value>(trimmed) {
        return AnalyticSpecification::from_value(v);
    }

    let mut first_error = None;
    for (start, end) in balanced_objects(raw) {
        let Ok(v @ Value::Object(_)) = serde_json::from_str::<Value>(&raw[start..end]) else {
            continue;
        };
        match AnalyticSpecification::from_value(v) {
            Ok(mut spec) => {
                let prose = [strip_fences(&raw[..start]), strip_fences(&raw[end..])]
                    .into_iter()
                    .filter(|p| !p.is_empty())
                    .collect::<Vec<_>>()
                    .join("\n\n");
                if !prose.is_empty() {
                    spec.explanation = Some(match spec.explanation.take() {
                        Some(inner) => format!("{prose}\n\n{inner}"),
                        None => prose,
                    });
                }
                return Ok(spec);
            }
            Err(e) => {
                first_error.get_or_insert(e);
            }
        }
    }
    Err(first_error.unwrap_or_else(|| ParseError::MalformedJson("no balanced JSON object found".into())))
}

#[cfg(test)]
mod tests {
    use super::*;

    const VALID: &str = r#"{
      "attributeMap": {"Worldwide Gross": {"queryPhrase": "gross"}, "Genre": {"queryPhrase": "genres"}},
      "taskMap": {"Derived Value": [{"attributes": ["Worldwide Gross", "Genre"], "operator": "AVG", "inferenceType": "explicit"}]},
      "visList": [{"attributes": ["Worldwide Gross", "Genre"], "tasks": ["Derived Value"],
        "vlSpec": {"$schema": "https://vega.github.io/schema/vega-lite/v5.json", "data": {"url": "movies.csv"},
          "mark": {"type": "bar", "tooltip": true},
          "encoding": {"x": {"field": "Genre", "type": "nominal"},
                       "y": {"field": "Worldwide Gross", "type": "quantitative", "aggregate": "mean", "axis": {"title": "Average gross"}}}}}]
    }"#;

    #[test]
    fn bare_object() {
        let s = parse(VALID).unwrap();
        assert_eq!(s.attribute_map.len(), 2);
        assert_eq!(s.task_map["Derived Value"][0].operator.as_deref(), Some("AVG"));
        let v = &s.vis_list[0];
        assert_eq!(v.mark, "bar");
        assert_eq!(v.data_url.as_deref(), Some("movies.csv"));
        assert_eq!(v.encodings["y"].aggregate.as_deref(), Some("mean"));
        assert_eq!(v.encodings["y"].axis_title.as_deref(), Some("Average gross"));
        assert!(s.explanation.is_none());
    }

    #[test]
    fn prose_wrapped() {
        let raw = format!("Here is the result: {VALID} Hope this helps!");
        let s = parse(&raw).unwrap();
        assert_eq!(s.explanation.as_deref(), Some("Here is the result:\n\nHope this helps!"));
        assert_eq!(s.vis_list.len(), 1);
    }

    #[test]
    fn fenced_with_leading_braces_in_prose() {
        let raw = format!("Step 1: map {{gross}} to an attribute.\n```json\n{VALID}\n```\nDone.");
        let s = parse(&raw).unwrap();
        assert_eq!(s.explanation.as_deref(), Some("Step 1: map {gross} to an attribute.\n\nDone."));
    }

    #[test]
    fn truncated_is_malformed() {
        assert!(matches!(parse(r#"{"attributeMap": {"#), Err(ParseError::MalformedJson(_))));
    }

    #[test]
    fn missing_key_is_malformed() {
        let err = parse(r#"{"attributeMap": {}, "taskMap": {}}"#).unwrap_err();
        assert_eq!(err, ParseError::MalformedJson("missing visList".into()));
    }

    #[test]
    fn braces_inside_strings() {
        let raw = r#"note {"attributeMap": {"A": {"queryPhrase": "a } b"}}, "taskMap": {}, "visList": []}"#;
        let s = parse(raw).unwrap();
        assert_eq!(s.attribute_map["A"].query_phrase, "a } b");
    }

    #[test]
    fn extra_keys_preserved() {
        let raw = r#"{"attributeMap": {"A": {"queryPhrase": "a", "isAmbiguous": false}}, "taskMap": {},
                     "visList": [{"mark": "bar", "encoding": {}}], "query": "q"}"#;
        let s = parse(raw).unwrap();
        assert_eq!(s.extra["query"], "q");
        assert_eq!(s.attribute_map["A"].extra["isAmbiguous"], false);
        assert_eq!(s.vis_list[0].mark, "bar");
        let again = parse(&serde_json::to_string(&s).unwrap()).unwrap();
        assert_eq!(again, s);
    }

    #[test]
    fn phrase_list_and_single_task_entry() {
        let raw = r#"{"attributeMap": {"A": {"queryPhrase": ["x", "y"]}}, "taskMap": {"Sort": {"attributes": ["A"]}}, "visList": []}"#;
        let s = parse(raw).unwrap();
        assert_eq!(s.attribute_map["A"].query_phrase, "x, y");
        assert_eq!(s.task_map["Sort"].len(), 1);
    }

    #[test]
    fn transform_outputs() {
        let vl = serde_json::json!({"mark": "bar", "transform": [
            {"calculate": "datum.a - datum.b", "as": "Profit"},
            {"window": [{"op": "rank", "as": "rank"}]},
            {"fold": ["a", "b"], "as": ["key", "value"]}
        ]});
        let v = VisSpec::from_vega_lite(vl, vec![], vec![]);
        assert_eq!(v.transform_outputs(), ["Profit", "rank", "key", "value"]);
    }
}
