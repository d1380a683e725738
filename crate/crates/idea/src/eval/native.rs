//! Native plugin functions: compiled enrichment routines registered under a
//! name (optionally namespaced as `lib#name`). A native function may load a
//! resource file once during initialization, which classifies it stateful;
//! evaluation must be pure given the initialized state.

use crate::data::Value;
use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NativeError {
    #[error("resource load failed: {0}")]
    ResourceLoad(String),
    #[error("type error: {0}")]
    Type(String),
}

/// Contract for a native function instance. `initialize` runs once per
/// evaluator lifetime, before any `evaluate` call.
pub trait NativeFunction: Send + Sync {
    fn initialize(&mut self, resource: Option<&Path>) -> Result<(), NativeError>;
    fn evaluate(&self, args: &[Value]) -> Result<Value, NativeError>;
    /// True when the function declares a resource file.
    fn wants_resource(&self) -> bool {
        false
    }
}

type Factory = Arc<dyn Fn() -> Box<dyn NativeFunction> + Send + Sync>;

/// Registry of native function factories; a fresh instance is created and
/// initialized per evaluator.
pub struct NativeRegistry {
    factories: RwLock<HashMap<String, (Factory, Option<PathBuf>)>>,
}

impl std::fmt::Debug for NativeRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let names: Vec<String> = self.factories.read().unwrap().keys().cloned().collect();
        write!(f, "NativeRegistry({names:?})")
    }
}

impl NativeRegistry {
    /// Registry preloaded with the built-in plugin functions.
    pub fn with_builtins() -> Arc<NativeRegistry> {
        let registry = NativeRegistry {
            factories: RwLock::new(HashMap::new()),
        };
        registry.register("testlib#removeSpecial", None, || Box::new(RemoveSpecial));
        registry.register("removeSpecial", None, || Box::new(RemoveSpecial));
        registry.register("usBombSafetyCheck", None, || Box::new(UsBombSafetyCheck));
        Arc::new(registry)
    }

    pub fn register(
        &self,
        name: &str,
        resource: Option<PathBuf>,
        factory: impl Fn() -> Box<dyn NativeFunction> + Send + Sync + 'static,
    ) {
        self.factories
            .write()
            .unwrap()
            .insert(name.to_string(), (Arc::new(factory), resource));
    }

    /// Registers the keyword-list safety check with its resource file.
    pub fn register_keyword_check(&self, name: &str, resource: PathBuf) {
        self.register(name, Some(resource), || Box::new(KeywordSafetyCheck::new()));
    }

    pub fn contains(&self, name: &str) -> bool {
        self.factories.read().unwrap().contains_key(name)
    }

    pub fn resource_of(&self, name: &str) -> Option<PathBuf> {
        self.factories
            .read()
            .unwrap()
            .get(name)
            .and_then(|(_, r)| r.clone())
    }

    /// Creates and initializes an instance.
    pub fn instantiate(&self, name: &str) -> Result<Box<dyn NativeFunction>, NativeError> {
        let (factory, resource) = self
            .factories
            .read()
            .unwrap()
            .get(name)
            .cloned()
            .ok_or_else(|| NativeError::Type(format!("unknown native function {name:?}")))?;
        let mut instance = factory();
        instance.initialize(resource.as_deref())?;
        Ok(instance)
    }
}

/// Strips every non-alphabetic character and lowercases the rest.
pub fn remove_special(s: &str) -> String {
    s.chars()
        .filter(|c| c.is_ascii_alphabetic())
        .collect::<String>()
        .to_lowercase()
}

struct RemoveSpecial;

impl NativeFunction for RemoveSpecial {
    fn initialize(&mut self, _resource: Option<&Path>) -> Result<(), NativeError> {
        Ok(())
    }

    fn evaluate(&self, args: &[Value]) -> Result<Value, NativeError> {
        match args {
            [Value::Text(s)] => Ok(Value::Text(remove_special(s))),
            [Value::Missing | Value::Null] => Ok(Value::Missing),
            _ => Err(NativeError::Type(
                "removeSpecial expects one string argument".into(),
            )),
        }
    }
}

/// Flags a record Red when its country is "US" and its text mentions the
/// fixed keyword; no external state.
struct UsBombSafetyCheck;

impl NativeFunction for UsBombSafetyCheck {
    fn initialize(&mut self, _resource: Option<&Path>) -> Result<(), NativeError> {
        Ok(())
    }

    fn evaluate(&self, args: &[Value]) -> Result<Value, NativeError> {
        let [Value::Object(record)] = args else {
            return Err(NativeError::Type("expected one record argument".into()));
        };
        let flagged = matches!(record.field("country"), Value::Text(c) if c == "US")
            && matches!(record.field("text"), Value::Text(t) if t.contains("bomb"));
        let mut out = record.clone();
        out.set(
            "safety_check_flag",
            Value::Text(if flagged { "Red" } else { "Green" }.into()),
        );
        Ok(Value::Object(out))
    }
}

/// Safety check backed by a '|'-separated resource file whose lines map a
/// country to a sensitive keyword (`id|country|keyword`). A record is Red
/// when its text contains any keyword listed for its country.
pub struct KeywordSafetyCheck {
    keywords: HashMap<String, Vec<String>>,
}

impl KeywordSafetyCheck {
    pub fn new() -> Self {
        KeywordSafetyCheck {
            keywords: HashMap::new(),
        }
    }
}

impl Default for KeywordSafetyCheck {
    fn default() -> Self {
        Self::new()
    }
}

impl NativeFunction for KeywordSafetyCheck {
    fn initialize(&mut self, resource: Option<&Path>) -> Result<(), NativeError> {
        let path = resource.ok_or_else(|| {
            NativeError::ResourceLoad("keyword list resource not configured".into())
        })?;
        let text = std::fs::read_to_string(path)
            .map_err(|e| NativeError::ResourceLoad(format!("{}: {e}", path.display())))?;
        for line in text.lines() {
            if line.trim().is_empty() {
                continue;
            }
            let items: Vec<&str> = line.split('|').collect();
            if items.len() < 3 {
                return Err(NativeError::ResourceLoad(format!(
                    "malformed keyword line {line:?}"
                )));
            }
            self.keywords
                .entry(items[1].to_string())
                .or_default()
                .push(items[2].to_string());
        }
        Ok(())
    }

    fn evaluate(&self, args: &[Value]) -> Result<Value, NativeError> {
        let [Value::Object(record)] = args else {
            return Err(NativeError::Type("expected one record argument".into()));
        };
        let country = record.field("country").as_text().unwrap_or_default();
        let text = record.field("text").as_text().unwrap_or_default();
        let flagged = self
            .keywords
            .get(country)
            .map(|words| words.iter().any(|w| text.contains(w.as_str())))
            .unwrap_or(false);
        let mut out = record.clone();
        out.set(
            "safety_check_flag",
            Value::Text(if flagged { "Red" } else { "Green" }.into()),
        );
        Ok(Value::Object(out))
    }

    fn wants_resource(&self) -> bool {
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::record;

    #[test]
    fn remove_special_strips_and_lowercases() {
        assert_eq!(remove_special("J_Doe99!"), "jdoe");
        assert_eq!(remove_special(""), "");
        assert_eq!(remove_special("ABC def"), "abcdef");
    }

    #[test]
    fn keyword_check_reads_pipe_separated_resource() {
        let dir = std::env::temp_dir();
        let path = dir.join(format!("idea-keywords-{}.txt", std::process::id()));
        std::fs::write(&path, "1|US|bomb\n2|US|attack\n3|FR|explosif\n").unwrap();
        let mut f = KeywordSafetyCheck::new();
        f.initialize(Some(&path)).unwrap();
        let red = f
            .evaluate(&[Value::Object(record! {
                "country" => Value::Text("US".into()),
                "text" => Value::Text("there is a bomb here".into()),
            })])
            .unwrap();
        let Value::Object(rec) = red else { panic!() };
        assert_eq!(rec.field("safety_check_flag"), &Value::Text("Red".into()));

        let green = f
            .evaluate(&[Value::Object(record! {
                "country" => Value::Text("FR".into()),
                "text" => Value::Text("there is a bomb here".into()),
            })])
            .unwrap();
        let Value::Object(rec) = green else { panic!() };
        assert_eq!(rec.field("safety_check_flag"), &Value::Text("Green".into()));
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn missing_resource_fails_initialization() {
        let mut f = KeywordSafetyCheck::new();
        let err = f
            .initialize(Some(Path::new("/definitely/not/here.txt")))
            .unwrap_err();
        assert!(matches!(err, NativeError::ResourceLoad(_)));
    }
}
