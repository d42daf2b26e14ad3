use nacekit::sources::extract_website_text;
use proptest::prelude::*;

fn arb_html() -> impl Strategy<Value = String> {
    let word = "[A-Za-z0-9][A-Za-z0-9,.!?-]{0,8}";
    let text = prop::collection::vec(word, 1..6).prop_map(|w| w.join(" "));
    let block = (prop::sample::select(vec!["p", "h1", "h2", "div", "li", "span", "b", "script", "nav", "footer", "style"]), text)
        .prop_map(|(tag, t)| format!("<{tag}>\n  {t}\t</{tag}>"));
    prop::collection::vec(block, 0..8).prop_map(|b| format!("<html><body>{}</body></html>", b.join("")))
}

proptest! {
    #[test]
    fn extraction_is_idempotent(html in arb_html()) {
        let once = extract_website_text(&html);
        prop_assert_eq!(extract_website_text(&once), once.clone());
        prop_assert!(!once.contains("  "));
    }

    #[test]
    fn dropped_elements_never_leak(secret in "[a-z]{12}") {
        let html = format!("<body><script>{secret}</script><nav>{secret}</nav><p>kept</p><footer>{secret}</footer></body>");
        prop_assert_eq!(extract_website_text(&html), "kept");
    }
}
