//! File formats: graph JSON, pattern libraries, machine configs.

use std::env;
use std::fs;
use std::path::Path;

use kitsune_core::graph::{builtin_graph, BuiltinParams, NodeDecl, OperatorGraph};
use kitsune_core::machine::{MachineConfig, PRESETS};
use kitsune_core::select::PatternLibrary;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// Environment variable naming the default machine config (path or preset).
pub const MACHINE_ENV: &str = "KITSUNE_MACHINE";

const BUILTIN_PREFIX: &str = "builtin:";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphFile {
    #[serde(default = "default_dtype")]
    pub dtype_bytes: u8,
    #[serde(default)]
    pub nodes: Vec<NodeDecl>,
}

fn default_dtype() -> u8 {
    2
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| CliError::Io { path: path.to_path_buf(), source })
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|source| CliError::Io { path: path.to_path_buf(), source })
}

pub(crate) fn parse_json<T: for<'de> Deserialize<'de>>(text: &str, origin: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| CliError::Parse {
        origin: origin.to_string(),
        line: e.line(),
        column: e.column(),
        message: strip_position(&e.to_string()),
    })
}

/// serde_json appends " at line L column C", which we report separately.
fn strip_position(msg: &str) -> String {
    match msg.rfind(" at line ") {
        Some(i) => msg[..i].to_string(),
        None => msg.to_string(),
    }
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("values serialize");
    s.push('\n');
    s
}

pub fn load_graph(text: &str, origin: &str) -> Result<OperatorGraph> {
    let file: GraphFile = parse_json(text, origin)?;
    OperatorGraph::from_decls(file.dtype_bytes, file.nodes).map_err(|e| CliError::model(origin, e))
}

pub fn graph_to_json(graph: &OperatorGraph) -> String {
    to_json(&GraphFile { dtype_bytes: graph.dtype_bytes(), nodes: graph.to_decls() })
}

/// Parses `KEY=VALUE` builtin parameters.
pub fn parse_params(raw: &[String]) -> Result<BuiltinParams> {
    let mut params = BuiltinParams::new();
    for p in raw {
        let (k, v) = p
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("parameter `{p}` is not KEY=VALUE")))?;
        let v: u64 = v
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("parameter `{k}` needs a non-negative integer, got `{v}`")))?;
        params = params.with(k.trim(), v);
    }
    Ok(params)
}

/// A graph argument is either `builtin:<name>` or a path to a graph file.
/// Returns a display name with the graph.
pub fn resolve_graph(arg: &str, params: &[String]) -> Result<(String, OperatorGraph)> {
    if let Some(name) = arg.strip_prefix(BUILTIN_PREFIX) {
        let p = parse_params(params)?;
        let g = builtin_graph(name, &p).map_err(|e| CliError::model(arg, e))?;
        return Ok((name.to_string(), g));
    }
    if !params.is_empty() {
        return Err(CliError::Usage("--param only applies to builtin graphs".into()));
    }
    let path = Path::new(arg);
    let g = load_graph(&read_text(path)?, arg)?;
    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| arg.to_string());
    Ok((name, g))
}

pub fn load_patterns(path: &Path) -> Result<PatternLibrary> {
    let origin = path.display().to_string();
    PatternLibrary::parse(&read_text(path)?).map_err(|e| match e {
        kitsune_core::Error::Pattern { line, column, message } => CliError::Parse { origin, line, column, message },
        other => CliError::model(origin, other),
    })
}

/// `arg` is a preset name or a JSON file; without one, the environment
/// variable is consulted, then the a100 preset.
pub fn resolve_machine(arg: Option<&str>) -> Result<MachineConfig> {
    let env_value = env::var(MACHINE_ENV).ok().filter(|v| !v.is_empty());
    let Some(spec) = arg.map(str::to_string).or(env_value) else {
        return Ok(MachineConfig::a100());
    };
    let cfg = match MachineConfig::preset(&spec) {
        Some(cfg) => cfg,
        None => {
            let path = Path::new(&spec);
            if !path.exists() {
                return Err(CliError::Usage(format!(
                    "machine `{spec}` is neither a preset ({}) nor a file",
                    PRESETS.join(", ")
                )));
            }
            parse_json(&read_text(path)?, &spec)?
        }
    };
    cfg.validate().map_err(|e| CliError::model(&spec, e))?;
    Ok(cfg)
}
