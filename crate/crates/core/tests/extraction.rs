mod common;

use proptest::prelude::*;
use propvis_core::extract::{extract_function, ExtractError};
use propvis_core::pipeline::{SOLUTION_FUNCTION, TEST_FUNCTION};

#[test]
fn scripted_completions_extract_as_intended() {
    for rec in common::script() {
        let code = extract_function(&rec.code_completion, SOLUTION_FUNCTION);
        match rec.task_id.as_str() {
            "t07" => assert!(matches!(code, Err(ExtractError::Syntax { .. })), "t07"),
            id => assert!(code.is_ok(), "{id}: {code:?}"),
        }
        if let Some(test) = &rec.test_completion {
            let test = extract_function(test, TEST_FUNCTION);
            match rec.task_id.as_str() {
                "t08" => assert!(matches!(test, Err(ExtractError::NotFound(_)))),
                id => assert!(test.is_ok(), "{id}: {test:?}"),
            }
        }
    }
}

fn statement() -> impl Strategy<Value = String> {
    prop_oneof![
        "[a-z]{1,6}".prop_map(|v| format!("{v} = image_patch.find(\"{v}\")")),
        "[a-z]{1,6}".prop_map(|v| format!("assert len({v}) > 0, \"no {v}\"")),
        "[a-z ]{0,12}".prop_map(|s| format!("name = \"{s}\"")),
        Just("items = [\n        \"a\",\n        \"b\",\n    ]".to_string()),
        Just("# a comment".to_string()),
        Just(String::new()),
    ]
}

prop_compose! {
    fn function()(body in prop::collection::vec(statement(), 0..6)) -> String {
        let mut src = "def execute_command(image):\n    image_patch = ImagePatch(image)\n".to_string();
        for s in body {
            src.push_str(&format!("    {s}\n"));
        }
        src.push_str("    return image_patch");
        src
    }
}

proptest! {
    #[test]
    fn wrapped_functions_come_back_verbatim(
        src in function(),
        before in "[A-Za-z ,.]{0,40}",
        after in "[A-Za-z ,.]{0,40}",
        fenced in any::<bool>(),
        indent in 0usize..3,
    ) {
        let pad = " ".repeat(indent * 4);
        let indented: Vec<String> = src.lines().map(|l| if l.is_empty() { String::new() } else { format!("{pad}{l}") }).collect();
        let block = indented.join("\n");
        let raw = if fenced {
            format!("{before}\n```python\n{block}\n```\n{after}")
        } else {
            format!("{before}\n{block}\n")
        };
        let got = extract_function(&raw, SOLUTION_FUNCTION).unwrap();
        let expected: Vec<&str> = src.lines().map(str::trim_end).collect();
        let expected = expected.join("\n");
        prop_assert_eq!(&got.source, expected.trim_end());
        let again = extract_function(&got.source, SOLUTION_FUNCTION).unwrap();
        prop_assert_eq!(again.source, got.source);
    }
}
