use std::path::Path;
use streamst::prompt::{render_translation_prompt, MockChatClient};

fn golden(name: &str) -> String {
    std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)).unwrap()
}

#[test]
fn three_preceding_sentences() {
    let preceding: Vec<String> =
        ["The meeting started late.", "Nobody had brought the slides.", "We waited for ten minutes."].map(String::from).to_vec();
    let got = render_translation_prompt("Then the speaker finally arrived.", &preceding, "Chinese").unwrap();
    assert_eq!(got, golden("prompt_three_preceding.txt"));
}

#[test]
fn older_context_is_dropped() {
    let mut preceding = vec!["An earlier remark.".to_string()];
    preceding.extend(["The meeting started late.", "Nobody had brought the slides.", "We waited for ten minutes."].map(String::from));
    let got = render_translation_prompt("Then the speaker finally arrived.", &preceding, "Chinese").unwrap();
    assert_eq!(got, golden("prompt_three_preceding.txt"));
}

#[test]
fn mock_client_finds_the_sentence() {
    let p = golden("prompt_three_preceding.txt");
    assert_eq!(MockChatClient::sentence_of(&p), Some("Then the speaker finally arrived."));
}
