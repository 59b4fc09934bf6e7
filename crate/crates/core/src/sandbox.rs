//! Isolated tool execution.
//!
//! Every tool run is a fresh child process started from a scratch directory
//! with a cleared environment. The child reads one JSON object on stdin and
//! must print one JSON object on stdout, either
//! `{"success": true, "result": ...}` or `{"success": false, "error": "..."}`.
//! Stderr is captured for diagnostics only. Scratch directories are removed
//! after each run.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::registry::{
    ArtifactId, ArtifactKind, CheckKind, Expectation, StateView, ToolSpec, ValidationCase,
};

pub const SCRIPT_PLACEHOLDER: &str = "{script}";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExecutionLimits {
    pub wall_time_ms: u64,
    pub max_stdout_bytes: u64,
    pub env_allowlist: Vec<String>,
}

impl Default for ExecutionLimits {
    fn default() -> Self {
        Self { wall_time_ms: 2000, max_stdout_bytes: 65536, env_allowlist: Vec::new() }
    }
}

impl ExecutionLimits {
    pub fn validate(&self) -> Result<(), String> {
        if self.wall_time_ms == 0 || self.max_stdout_bytes == 0 {
            return Err("execution limits must be strictly positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolResult {
    pub success: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub duration_ms: u64,
    pub truncated: bool,
}

impl ToolResult {
    fn ok(result: Value, duration_ms: u64) -> Self {
        Self { success: true, result: Some(result), error: None, duration_ms, truncated: false }
    }

    fn fail(error: impl Into<String>, duration_ms: u64) -> Self {
        Self { success: false, result: None, error: Some(error.into()), duration_ms, truncated: false }
    }

    /// The child-protocol document (without timing), as seen by a solver.
    pub fn to_document(&self) -> Value {
        match (&self.result, &self.error) {
            (Some(r), _) if self.success => serde_json::json!({"success": true, "result": r}),
            (_, e) => serde_json::json!({"success": false, "error": e.clone().unwrap_or_default()}),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub check_id: String,
    pub check_kind: CheckKind,
    pub passed: bool,
    pub detail: String,
    pub duration_ms: u64,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SandboxError {
    #[error("arguments violate the signature of the tool: {0}")]
    SignatureViolation(String),
    #[error("sandbox unavailable: {0}")]
    SandboxUnavailable(String),
    #[error("validation target `{0}` cannot be resolved")]
    UnresolvableTarget(ArtifactId),
}

/// Interpreter command templates; `{script}` is replaced with the path of the
/// entrypoint file inside the scratch directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SandboxConfig {
    pub run_command: Vec<String>,
    pub parse_command: Vec<String>,
    pub pool_size: usize,
    pub script_name: String,
}

impl Default for SandboxConfig {
    fn default() -> Self {
        Self {
            run_command: vec!["python3".into(), "-I".into(), "-S".into(), SCRIPT_PLACEHOLDER.into()],
            parse_command: vec![
                "python3".into(),
                "-I".into(),
                "-S".into(),
                "-c".into(),
                "import ast,sys\nsrc=open(sys.argv[1]).read()\ntry:\n    ast.parse(src)\nexcept SyntaxError as e:\n    sys.stderr.write('SyntaxError: %s (line %s)\\n' % (e.msg, e.lineno))\n    sys.exit(1)".into(),
                SCRIPT_PLACEHOLDER.into(),
            ],
            pool_size: 4,
            script_name: "tool.py".into(),
        }
    }
}

struct RawRun {
    stdout: Vec<u8>,
    stderr: Vec<u8>,
    overflow: bool,
    timed_out: bool,
    exit_code: Option<i32>,
    duration_ms: u64,
}

pub struct Sandbox {
    config: SandboxConfig,
    run_program: PathBuf,
    parse_program: PathBuf,
    slots: Mutex<usize>,
    slot_freed: Condvar,
}

impl std::fmt::Debug for Sandbox {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Sandbox").field("config", &self.config).finish_non_exhaustive()
    }
}

impl Sandbox {
    pub fn new(config: SandboxConfig) -> Result<Self, SandboxError> {
        let run_program = resolve_program(config.run_command.first())?;
        let parse_program = resolve_program(config.parse_command.first())?;
        let pool = config.pool_size.max(1);
        Ok(Self { config, run_program, parse_program, slots: Mutex::new(pool), slot_freed: Condvar::new() })
    }

    pub fn with_defaults() -> Result<Self, SandboxError> {
        Self::new(SandboxConfig::default())
    }

    pub fn config(&self) -> &SandboxConfig {
        &self.config
    }

    /// Syntax check of the entrypoint without executing it.
    pub fn dry_parse(&self, tool: &ToolSpec) -> Result<CheckResult, SandboxError> {
        let limits = ExecutionLimits::default();
        let raw = self.spawn(&self.parse_program, &self.config.parse_command, &tool.entrypoint, None, &limits)?;
        let passed = !raw.timed_out && raw.exit_code == Some(0);
        let detail = if passed {
            "parsed".to_string()
        } else if raw.timed_out {
            "timeout".to_string()
        } else {
            last_line(&raw.stderr).unwrap_or_else(|| format!("parser exited with {:?}", raw.exit_code))
        };
        Ok(CheckResult {
            check_id: String::new(),
            check_kind: CheckKind::Syntax,
            passed,
            detail,
            duration_ms: raw.duration_ms,
        })
    }

    pub fn execute_tool(&self, tool: &ToolSpec, args: &Value, limits: &ExecutionLimits) -> Result<ToolResult, SandboxError> {
        check_signature(tool, args)?;
        let input = serde_json::to_vec(args).expect("JSON values serialize");
        let raw = self.spawn(&self.run_program, &self.config.run_command, &tool.entrypoint, Some(&input), limits)?;
        Ok(classify(raw, limits))
    }

    /// Evaluates a validation case against a (shadow) state.
    pub fn run_validation_case(&self, case: &ValidationCase, state: &StateView) -> Result<CheckResult, SandboxError> {
        let started = Instant::now();
        let mut targets = Vec::with_capacity(case.targets.len());
        for id in &case.targets {
            let rec = state.active(id).ok_or_else(|| SandboxError::UnresolvableTarget(id.clone()))?;
            targets.push(rec);
        }
        let mut passed = true;
        let mut details = Vec::new();
        match case.check_kind {
            CheckKind::Syntax => {
                for rec in targets.iter().filter(|r| r.id.kind == ArtifactKind::Tool) {
                    let tool = rec.payload.as_tool().expect("tool kind carries a tool payload");
                    let r = self.dry_parse(tool)?;
                    passed &= r.passed;
                    details.push(format!("{}: {}", rec.id, r.detail));
                }
            }
            CheckKind::Schema => {
                for rec in &targets {
                    match rec.payload.validate() {
                        Ok(()) => details.push(format!("{}: well-formed", rec.id)),
                        Err(e) => {
                            passed = false;
                            details.push(format!("{}: {e}", rec.id));
                        }
                    }
                }
            }
            CheckKind::Runtime | CheckKind::Regression => {
                let input = case.fixture_input.clone().unwrap_or_else(|| Value::Object(Default::default()));
                let tools: Vec<_> = targets.iter().filter(|r| r.id.kind == ArtifactKind::Tool).collect();
                if tools.is_empty() {
                    passed = false;
                    details.push("no tool among the targets".into());
                }
                for rec in tools {
                    let tool = rec.payload.as_tool().expect("tool kind carries a tool payload");
                    let (ok, detail) = match self.execute_tool(tool, &input, &case.limits) {
                        Ok(result) => evaluate(&case.expectation, &result),
                        Err(SandboxError::SignatureViolation(e)) => (false, format!("signature violation: {e}")),
                        Err(e) => return Err(e),
                    };
                    passed &= ok;
                    details.push(format!("{}: {detail}", rec.id));
                }
            }
        }
        Ok(CheckResult {
            check_id: String::new(),
            check_kind: case.check_kind,
            passed,
            detail: details.join("; "),
            duration_ms: started.elapsed().as_millis() as u64,
        })
    }

    fn acquire(&self) -> SlotGuard<'_> {
        let mut free = self.slots.lock().unwrap();
        while *free == 0 {
            free = self.slot_freed.wait(free).unwrap();
        }
        *free -= 1;
        SlotGuard { sandbox: self }
    }

    fn spawn(
        &self,
        program: &Path,
        template: &[String],
        script: &str,
        input: Option<&[u8]>,
        limits: &ExecutionLimits,
    ) -> Result<RawRun, SandboxError> {
        let _slot = self.acquire();
        let scratch = tempfile::Builder::new()
            .prefix("evolve-tool-")
            .tempdir()
            .map_err(|e| SandboxError::SandboxUnavailable(format!("scratch directory: {e}")))?;
        let script_path = scratch.path().join(&self.config.script_name);
        std::fs::write(&script_path, script)
            .map_err(|e| SandboxError::SandboxUnavailable(format!("writing entrypoint: {e}")))?;
        let script_arg = script_path.to_string_lossy();
        let mut cmd = Command::new(program);
        for arg in &template[1..] {
            cmd.arg(arg.replace(SCRIPT_PLACEHOLDER, &script_arg));
        }
        cmd.current_dir(scratch.path())
            .env_clear()
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped());
        for name in &limits.env_allowlist {
            if let Ok(v) = std::env::var(name) {
                cmd.env(name, v);
            }
        }
        let started = Instant::now();
        let mut child = cmd
            .spawn()
            .map_err(|e| SandboxError::SandboxUnavailable(format!("spawning {}: {e}", program.display())))?;

        let mut stdin = child.stdin.take().expect("stdin is piped");
        let input = input.map(<[u8]>::to_vec).unwrap_or_default();
        let writer = thread::spawn(move || {
            // A child that exits without reading its input closes the pipe; ignore that.
            let _ = stdin.write_all(&input);
        });
        let cap = limits.max_stdout_bytes as usize;
        let stdout = child.stdout.take().expect("stdout is piped");
        let stderr = child.stderr.take().expect("stderr is piped");
        let out_reader = thread::spawn(move || read_capped(stdout, cap));
        let err_reader = thread::spawn(move || read_capped(stderr, 16 * 1024));

        let deadline = Duration::from_millis(limits.wall_time_ms);
        let mut timed_out = false;
        let status = loop {
            match child.try_wait() {
                Ok(Some(status)) => break Some(status),
                Ok(None) if started.elapsed() >= deadline => {
                    timed_out = true;
                    let _ = child.kill();
                    break child.wait().ok();
                }
                Ok(None) => thread::sleep(Duration::from_millis(1)),
                Err(e) => return Err(SandboxError::SandboxUnavailable(format!("waiting for child: {e}"))),
            }
        };
        let duration_ms = started.elapsed().as_millis() as u64;
        let _ = writer.join();
        let (stdout, overflow) = out_reader.join().unwrap_or_default();
        let (stderr, _) = err_reader.join().unwrap_or_default();
        Ok(RawRun {
            stdout,
            stderr,
            overflow,
            timed_out,
            exit_code: status.and_then(|s| s.code()),
            duration_ms,
        })
    }
}

struct SlotGuard<'a> {
    sandbox: &'a Sandbox,
}

impl Drop for SlotGuard<'_> {
    fn drop(&mut self) {
        *self.sandbox.slots.lock().unwrap() += 1;
        self.sandbox.slot_freed.notify_one();
    }
}

fn resolve_program(first: Option<&String>) -> Result<PathBuf, SandboxError> {
    let name = first.ok_or_else(|| SandboxError::SandboxUnavailable("empty interpreter command".into()))?;
    let candidate = PathBuf::from(name);
    if candidate.components().count() > 1 {
        return if candidate.is_file() {
            Ok(candidate)
        } else {
            Err(SandboxError::SandboxUnavailable(format!("interpreter `{name}` not found")))
        };
    }
    let path = std::env::var_os("PATH").unwrap_or_default();
    std::env::split_paths(&path)
        .map(|dir| dir.join(name))
        .find(|p| p.is_file())
        .ok_or_else(|| SandboxError::SandboxUnavailable(format!("interpreter `{name}` not found on PATH")))
}

fn read_capped(mut src: impl Read, cap: usize) -> (Vec<u8>, bool) {
    let mut buf = Vec::new();
    let mut chunk = [0u8; 8192];
    let mut overflow = false;
    loop {
        match src.read(&mut chunk) {
            Ok(0) | Err(_) => break,
            Ok(n) => {
                if buf.len() + n > cap {
                    buf.extend_from_slice(&chunk[..cap - buf.len()]);
                    overflow = true;
                    // Keep draining so the child never blocks on a full pipe.
                } else if !overflow {
                    buf.extend_from_slice(&chunk[..n]);
                }
            }
        }
    }
    (buf, overflow)
}

fn last_line(bytes: &[u8]) -> Option<String> {
    String::from_utf8_lossy(bytes)
        .lines()
        .rev()
        .find(|l| !l.trim().is_empty())
        .map(|l| l.trim().to_string())
}

fn classify(raw: RawRun, limits: &ExecutionLimits) -> ToolResult {
    let d = raw.duration_ms;
    if raw.timed_out {
        return ToolResult::fail("timeout", d);
    }
    if raw.overflow {
        let mut r = ToolResult::fail(format!("output exceeded {} bytes", limits.max_stdout_bytes), d);
        r.truncated = true;
        return r;
    }
    let text = String::from_utf8_lossy(&raw.stdout);
    let parsed: Result<Value, _> = serde_json::from_str(text.trim());
    let doc = match parsed {
        Ok(Value::Object(map)) => map,
        _ => {
            let mut msg = "protocol error: stdout is not a single JSON object".to_string();
            if raw.exit_code != Some(0) {
                msg = format!("exit status {:?}", raw.exit_code);
            }
            if let Some(line) = last_line(&raw.stderr) {
                msg.push_str(": ");
                msg.push_str(&line);
            }
            return ToolResult::fail(msg, d);
        }
    };
    if raw.exit_code != Some(0) {
        let mut msg = format!("exit status {:?}", raw.exit_code);
        if let Some(line) = last_line(&raw.stderr) {
            msg.push_str(": ");
            msg.push_str(&line);
        }
        return ToolResult::fail(msg, d);
    }
    match (doc.get("success"), doc.get("result"), doc.get("error")) {
        (Some(Value::Bool(true)), Some(result), _) => ToolResult::ok(result.clone(), d),
        (Some(Value::Bool(false)), _, Some(Value::String(e))) => ToolResult::fail(e.clone(), d),
        _ => ToolResult::fail("protocol error: reply must carry success with result or error", d),
    }
}

fn check_signature(tool: &ToolSpec, args: &Value) -> Result<(), SandboxError> {
    let obj = args
        .as_object()
        .ok_or_else(|| SandboxError::SignatureViolation("arguments must be a JSON object".into()))?;
    for p in &tool.parameters {
        match obj.get(&p.name) {
            None if p.required => {
                return Err(SandboxError::SignatureViolation(format!("missing required parameter `{}`", p.name)))
            }
            Some(v) if !p.type_tag.accepts(v) => {
                return Err(SandboxError::SignatureViolation(format!(
                    "parameter `{}` expects {:?}",
                    p.name, p.type_tag
                )))
            }
            _ => {}
        }
    }
    Ok(())
}

/// Applies an expectation predicate to a tool result.
pub fn evaluate(expectation: &Expectation, result: &ToolResult) -> (bool, String) {
    if !result.success {
        return (false, format!("tool failed: {}", result.error.as_deref().unwrap_or("")));
    }
    let value = result.result.as_ref().expect("successful results carry a value");
    match expectation {
        Expectation::SuccessFlagTrue => (true, "success".into()),
        Expectation::ExactMatch(expected) => {
            if value == expected {
                (true, "exact match".into())
            } else {
                (false, format!("expected {expected}, got {value}"))
            }
        }
        Expectation::Contains(needle) => {
            let hay = match value {
                Value::String(s) => s.clone(),
                other => other.to_string(),
            };
            if hay.contains(needle.as_str()) {
                (true, format!("contains {needle:?}"))
            } else {
                (false, format!("{needle:?} not found in result"))
            }
        }
    }
}
