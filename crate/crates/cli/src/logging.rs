//! Line-delimited JSON log events on stderr.

use std::io::Write;

use log::kv::{Error, Key, Value, VisitSource};
use serde_json::{Map, Value as Json};

struct Collect<'a>(&'a mut Map<String, Json>);

impl<'kvs> VisitSource<'kvs> for Collect<'_> {
    fn visit_pair(&mut self, key: Key<'kvs>, value: Value<'kvs>) -> Result<(), Error> {
        let v = if let Some(n) = value.to_u64() {
            Json::from(n)
        } else if let Some(n) = value.to_i64() {
            Json::from(n)
        } else if let Some(x) = value.to_f64() {
            Json::from(x)
        } else if let Some(b) = value.to_bool() {
            Json::from(b)
        } else {
            Json::from(value.to_string())
        };
        self.0.insert(key.as_str().to_string(), v);
        Ok(())
    }
}

/// Level defaults to `info`; `RUST_LOG` overrides it.
pub fn init(quiet: bool) {
    let default = if quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(default))
        .format(|buf, record| {
            let mut event = Map::new();
            event.insert("level".into(), record.level().as_str().to_lowercase().into());
            event.insert("target".into(), record.target().into());
            event.insert("message".into(), record.args().to_string().into());
            let _ = record.key_values().visit(&mut Collect(&mut event));
            writeln!(buf, "{}", Json::Object(event))
        })
        .init();
}
