//! Terminal chat loop over one session. `/quit` or end of input leaves.

use std::io::{BufRead, Write};
use std::sync::Arc;

use anyhow::Result;

use crate::service::{Service, TurnPayload};

/// Renders one system turn with its inspector line.
pub fn render(p: &TurnPayload) -> String {
    let items: Vec<String> = p.items.iter().map(|i| format!("{} ({:.3})", i.name, i.p)).collect();
    format!(
        "system: {}\n  goal: {} | topics: {} | items: {}\n",
        p.response,
        p.goal.join(", "),
        p.topics.join(", "),
        if items.is_empty() { "-".to_string() } else { items.join(", ") }
    )
}

pub fn repl(svc: Arc<Service>, input: impl BufRead, mut out: impl Write) -> Result<()> {
    let rt = tokio::runtime::Builder::new_current_thread().enable_all().build()?;
    let id = svc.create_session();
    writeln!(out, "session {id}; type /quit to leave")?;
    for line in input.lines() {
        let line = line?;
        let text = line.trim();
        if text == "/quit" {
            break;
        }
        if text.is_empty() {
            continue;
        }
        match rt.block_on(svc.turn(&id, text)) {
            Ok(p) => write!(out, "{}", render(&p))?,
            Err(e) => writeln!(out, "error[{}]: {e}", e.kind())?,
        }
        out.flush()?;
    }
    Ok(())
}
