//! Turning a single global prompt into per-chunk storyboard prompts through
//! the chat endpoint, plus the validate-and-reprompt loop that guards every
//! endpoint response.
//!
//! Two clients are shown: the deterministic mock (offline storyboard writer)
//! and a scripted client that first returns a malformed answer, driving the
//! pipeline's corrective retry.
//!
//! Run with `cargo run --example prompt_expansion`.

use physvid::annotate::{gen_counterfactual, infer_local_prompts};
use physvid::vlm::{MockVlm, ScriptedVlm};

fn main() -> physvid::Result<()> {
    let global = "a red ball falls and bounces off the floor";
    let chunks = 7;

    // Offline expansion via the mock endpoint.
    let mock = MockVlm::new();
    let locals = infer_local_prompts(&mock, global, chunks, 2)?;
    println!("global prompt: {global}\n");
    for (k, local) in locals.iter().enumerate() {
        let negative = gen_counterfactual(&mock, local, 2)?;
        println!("chunk {k}:");
        println!("  prompt:   {local}");
        println!("  negative: {negative}");
    }

    // A scripted endpoint that answers with the wrong line count first. The
    // pipeline detects the bad response and re-prompts with a correction; the
    // second scripted answer satisfies the contract.
    let bad = "1. the ball falls\n2. the ball rises";
    let good: String = (1..=chunks)
        .map(|i| format!("{i}. the ball drifts slowly toward the floor\n"))
        .collect();
    let scripted = ScriptedVlm::new(vec![bad.to_string(), good.clone()]);
    let recovered = infer_local_prompts(&scripted, global, chunks, 2)?;
    println!(
        "\nscripted endpoint: first answer had 2 lines instead of {chunks}; \
         recovered after {} calls",
        scripted.calls()
    );
    assert_eq!(scripted.calls(), 2);
    assert_eq!(recovered.len(), chunks);

    // Exhausting the retry budget is a hard, typed failure that carries the
    // raw responses for debugging.
    let stubborn = ScriptedVlm::new(vec![bad.to_string(), bad.to_string(), bad.to_string()]);
    let err = infer_local_prompts(&stubborn, global, chunks, 2).unwrap_err();
    println!("stubborn endpoint -> {err}");
    println!("(exit code {} when surfaced through the binary)", err.exit_code());
    Ok(())
}
