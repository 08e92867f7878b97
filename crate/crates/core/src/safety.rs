//! Conservative static screen for generated snippets, run before any
//! execution.

use std::fmt;

/// Modules whose import is refused.
const DENIED_MODULES: &[&str] = &[
    "asyncio", "builtins", "code", "codeop", "concurrent", "ctypes", "dbm", "fcntl", "ftplib", "gc",
    "glob", "http", "importlib", "inspect", "io", "marshal", "mmap", "multiprocessing", "nt", "os",
    "pathlib", "pickle", "platform", "posix", "pty", "requests", "resource", "runpy", "select",
    "selectors", "shelve", "shutil", "signal", "smtplib", "socket", "sqlite3", "ssl", "subprocess",
    "sys", "sysconfig", "tarfile", "telnetlib", "tempfile", "threading", "urllib", "webbrowser",
    "zipfile",
];

/// Names refused wherever they appear as identifiers.
const DENIED_NAMES: &[&str] = &[
    "eval", "exec", "compile", "open", "globals", "locals", "vars", "getattr", "setattr", "delattr",
    "input", "breakpoint", "memoryview", "exit", "quit", "help", "os", "sys", "subprocess",
    "socket", "importlib", "ctypes", "shutil", "pathlib", "builtins",
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SafetyVerdict {
    Pass,
    Reject(String),
}

impl SafetyVerdict {
    pub fn passed(&self) -> bool {
        matches!(self, SafetyVerdict::Pass)
    }
}

impl fmt::Display for SafetyVerdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SafetyVerdict::Pass => f.write_str("pass"),
            SafetyVerdict::Reject(r) => write!(f, "reject: {r}"),
        }
    }
}

pub fn safety_scan(source: &str) -> SafetyVerdict {
    let tokens = identifiers(source);
    for (i, tok) in tokens.iter().enumerate() {
        if tok.starts_with("__") && tok.ends_with("__") && tok.len() > 4 {
            return SafetyVerdict::Reject(format!("dunder name `{tok}`"));
        }
        if DENIED_NAMES.contains(&tok.as_str()) {
            return SafetyVerdict::Reject(format!("forbidden name `{tok}`"));
        }
        if tok == "import" || tok == "from" {
            if let Some(module) = tokens.get(i + 1) {
                if DENIED_MODULES.contains(&module.as_str()) {
                    return SafetyVerdict::Reject(format!("forbidden module `{module}`"));
                }
            }
        }
    }
    // `import a, b` lists every module after the keyword on the same line.
    for line in source.lines() {
        let line = line.trim_start();
        if let Some(rest) = line.strip_prefix("import ") {
            for part in rest.split(',') {
                let module = part.split_whitespace().next().unwrap_or("");
                let top = module.split('.').next().unwrap_or("");
                if DENIED_MODULES.contains(&top) {
                    return SafetyVerdict::Reject(format!("forbidden module `{top}`"));
                }
            }
        }
    }
    SafetyVerdict::Pass
}

/// Identifier tokens outside comments and plain string literals. The
/// contents of f-strings are scanned, since their braces hold code.
fn identifiers(source: &str) -> Vec<String> {
    let chars: Vec<char> = source.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c == '#' {
            while i < chars.len() && chars[i] != '\n' {
                i += 1;
            }
        } else if c == '"' || c == '\'' {
            let prefix = out.last().map(String::as_str).unwrap_or("");
            let adjacent = i > 0 && (chars[i - 1].is_alphanumeric() || chars[i - 1] == '_');
            let formatted = adjacent && prefix.len() <= 2 && prefix.to_ascii_lowercase().contains('f');
            let triple = chars.get(i + 1) == Some(&c) && chars.get(i + 2) == Some(&c);
            let quote_len = if triple { 3 } else { 1 };
            let start = i + quote_len;
            let mut j = start;
            while j < chars.len() {
                if chars[j] == '\\' {
                    j += 2;
                    continue;
                }
                if chars[j] == c && (!triple || (chars.get(j + 1) == Some(&c) && chars.get(j + 2) == Some(&c))) {
                    break;
                }
                j += 1;
            }
            if formatted {
                let inner: String = chars[start..j.min(chars.len())].iter().collect();
                out.extend(identifiers(&inner));
            }
            i = (j + quote_len).min(chars.len().max(j));
        } else if c.is_alphabetic() || c == '_' {
            let s = i;
            while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            out.push(chars[s..i].iter().collect());
        } else {
            i += 1;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pure_string_logic_passes() {
        let src = r#"
import re
from datetime import datetime

def transform(row):
    # open/close are clock times
    o = row.get("Opening Time") or ""
    c = row.get("open")
    if o == "00:00" and re.match(r"\d+", o):
        return "True"
    return {"a": "b"}.get(o, "Unknown")
"#;
        assert_eq!(safety_scan(src), SafetyVerdict::Pass);
    }

    #[test]
    fn process_modules_rejected() {
        for src in [
            "import subprocess\ndef transform(row): return 'x'",
            "from os import system\ndef transform(row): return 'x'",
            "import re, shutil\ndef transform(row): return 'x'",
            "import os.path\ndef transform(row): return 'x'",
            "def transform(row):\n    import socket\n    return 'x'",
        ] {
            assert!(!safety_scan(src).passed(), "{src}");
        }
    }

    #[test]
    fn dynamic_evaluation_rejected() {
        for src in [
            "def transform(row): return eval(row['x'])",
            "def transform(row): exec('x=1'); return 'x'",
            "def transform(row): return str(compile('1','f','eval'))",
            "def transform(row): return __import__('os').name",
            "def transform(row): return ().__class__.__bases__[0]",
            "def transform(row): return getattr(row, 'x')",
            "def transform(row): return open('/etc/passwd').read()",
            "def transform(row): return f\"{eval('1')}\"",
        ] {
            assert!(!safety_scan(src).passed(), "{src}");
        }
    }

    #[test]
    fn strings_and_comments_are_inert() {
        assert!(safety_scan("def transform(row):\n    return 'eval open os'  # exec\n").passed());
        assert!(safety_scan("def transform(row):\n    return \"\"\"import os\"\"\"\n").passed());
    }
}
