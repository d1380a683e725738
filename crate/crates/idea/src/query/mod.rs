//! Declarative language surface: tokenizer, statement/query parser, and the
//! canonical pretty-printer used for round-trip checks.

pub mod ast;
mod parser;
mod printer;
mod token;

pub use ast::*;
pub use parser::{parse_function_body, parse_script, parse_statement};
pub use printer::{print_query, print_script, print_statement};

/// Parse failure: either a malformed token stream or a construct that is
/// recognized but deliberately outside the supported subset.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum QueryError {
    #[error("syntax error at line {line}, column {col}: expected {expected}")]
    Syntax {
        line: u32,
        col: u32,
        expected: String,
    },
    #[error("unsupported syntax at line {line}, column {col}: {construct}")]
    Unsupported {
        construct: String,
        line: u32,
        col: u32,
    },
}

impl QueryError {
    pub(crate) fn syntax(line: u32, col: u32, expected: impl Into<String>) -> Self {
        QueryError::Syntax {
            line,
            col,
            expected: expected.into(),
        }
    }

    pub fn is_unsupported(&self) -> bool {
        matches!(self, QueryError::Unsupported { .. })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Value;

    #[test]
    fn parses_type_and_dataset_ddl() {
        let script = r#"
          CREATE TYPE TweetType AS OPEN {
              id : int64,
              text: string
          };
          CREATE DATASET Tweets(TweetType)
          PRIMARY KEY id;
        "#;
        let stmts = parse_script(script).unwrap();
        assert_eq!(stmts.len(), 2);
        match &stmts[0].kind {
            StatementKind::CreateType(t) => {
                assert_eq!(t.name, "TweetType");
                assert!(t.open);
                assert_eq!(
                    t.fields,
                    vec![
                        ("id".to_string(), "int64".to_string()),
                        ("text".to_string(), "string".to_string())
                    ]
                );
            }
            other => panic!("unexpected {other:?}"),
        }
        match &stmts[1].kind {
            StatementKind::CreateDataset(d) => {
                assert_eq!(d.primary_key, vec!["id"]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn parses_feed_lifecycle_script() {
        let script = r#"
          CREATE FEED TweetFeed WITH {
            "type-name" : "TweetType",
            "adapter-name": "socket_adapter",
            "format" : "JSON",
            "sockets": "127.0.0.1:10001",
            "address-type": "IP"
          };
          CONNECT FEED TweetFeed TO DATASET Tweets;
          START FEED TweetFeed;
        "#;
        let stmts = parse_script(script).unwrap();
        assert_eq!(stmts.len(), 3);
        match &stmts[0].kind {
            StatementKind::CreateFeed(f) => {
                assert_eq!(f.name, "TweetFeed");
                assert_eq!(
                    f.with.field("sockets"),
                    &Value::Text("127.0.0.1:10001".into())
                );
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(&stmts[2].kind, StatementKind::StartFeed(n) if n == "TweetFeed"));
    }

    #[test]
    fn parses_case_let_function_body() {
        let body = r#"
            LET safety_check_flag =
              CASE tweet.country = "US"
                   AND contains(tweet.text, "bomb")
                WHEN true THEN "Red" ELSE "Green"
              END
            SELECT tweet.*, safety_check_flag
        "#;
        let q = parse_function_body(body).unwrap();
        assert_eq!(q.lets.len(), 1);
        let SelectHead::Items(items) = &q.select else {
            panic!("expected items");
        };
        assert_eq!(items.len(), 2);
        assert!(matches!(&items[0], SelectItem::Star { source } if source == "tweet"));
        match &q.lets[0].expr {
            Expr::Case { operand, arms, otherwise } => {
                assert!(operand.is_some());
                assert_eq!(arms.len(), 1);
                assert!(otherwise.is_some());
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn parses_exists_subquery() {
        let body = r#"
            LET safety_check_flag = CASE
              EXISTS(SELECT s FROM SensitiveWords s
                  WHERE tweet.country = s.country AND
                  contains(tweet.text, s.word))
              WHEN true THEN "Red" ELSE "Green"
              END
            SELECT tweet.*, safety_check_flag
        "#;
        let q = parse_function_body(body).unwrap();
        match &q.lets[0].expr {
            Expr::Case { operand: Some(op), .. } => {
                assert!(matches!(op.as_ref(), Expr::Exists(_)));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn parses_in_subquery_with_group_order_limit() {
        let body = r#"
            LET high_risk_flag = CASE
              t.country IN (SELECT VALUE s.country
                FROM SensitiveWords s
                GROUP BY s.country
                ORDER BY count(s)
                LIMIT 10)
              WHEN true THEN "Red" ELSE "Green"
            END
            SELECT t.*, high_risk_flag
        "#;
        let q = parse_function_body(body).unwrap();
        let Expr::Case { operand: Some(op), .. } = &q.lets[0].expr else {
            panic!("expected case");
        };
        let Expr::In { negated, collection, .. } = op.as_ref() else {
            panic!("expected IN, got {op:?}");
        };
        assert!(!negated);
        let Expr::Subquery(sub) = collection.as_ref() else {
            panic!("expected subquery");
        };
        assert_eq!(sub.group_by.len(), 1);
        assert_eq!(sub.order_by.len(), 1);
        assert_eq!(sub.limit, Some(Expr::Literal(Value::Int64(10))));
    }

    #[test]
    fn parses_datetime_arithmetic_and_joins() {
        let body = r#"
            LET nearby_religious_attacks = (
              SELECT r.religion_name AS religion, count(a.attack_record_id) AS attack_num
              FROM ReligiousBuildings r, AttackEvents a
              WHERE spatial_intersect(create_point(t.latitude, t.longitude),
                create_circle(r.building_location, 3.0))
                AND t.created_at < a.attack_datetime + duration("P2M")
                AND t.created_at > a.attack_datetime
                AND r.religion_name = a.related_religion
              GROUP BY r.religion_name)
            SELECT t.*, nearby_religious_attacks
        "#;
        let q = parse_function_body(body).unwrap();
        let Expr::Subquery(sub) = &q.lets[0].expr else {
            panic!("expected subquery");
        };
        assert_eq!(sub.from.len(), 2);
        assert_eq!(sub.from[1].alias, "a");
    }

    #[test]
    fn rejects_feed_datasource_as_unsupported() {
        let err = parse_statement(
            "INSERT INTO EnrichedTweets(SELECT VALUE tweetSafetyCheck(t) FROM FEED Tweets t);",
        )
        .unwrap_err();
        assert!(err.is_unsupported(), "got {err:?}");
    }

    #[test]
    fn truncated_statement_reports_position() {
        let err = parse_script("CREATE DATASET").unwrap_err();
        match err {
            QueryError::Syntax { line, col, .. } => {
                assert_eq!(line, 1);
                assert!(col >= 15);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn native_namespace_calls_parse() {
        let q = parse_function_body(
            r#"LET cleaned = testlib#removeSpecial(x.user.screen_name) SELECT x.*, cleaned"#,
        )
        .unwrap();
        match &q.lets[0].expr {
            Expr::Call { namespace, name, args } => {
                assert_eq!(namespace.as_deref(), Some("testlib"));
                assert_eq!(name, "removeSpecial");
                assert_eq!(args.len(), 1);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn round_trip_is_stable() {
        let scripts = [
            "CREATE TYPE T AS OPEN { id : int64, text: string };",
            "CREATE DATASET D(T) PRIMARY KEY id;",
            "CREATE INDEX location_idx ON monumentList(monument_location) TYPE RTREE;",
            r#"CREATE FUNCTION f(t) { LET x = (SELECT VALUE s.rating FROM Ratings s WHERE t.country = s.code) SELECT t.*, x };"#,
            r#"INSERT INTO Tweets([{"id":0, "text": "Let there be light"}]);"#,
            r#"SELECT tweet.country Country, count(tweet) Num FROM Tweets tweet LET e = f(tweet)[0] WHERE e.flag = "Red" GROUP BY tweet.country;"#,
            r#"UPSERT INTO SensitiveWords([{"id":1, "word": "a \"quoted\" wrd\n"}]);"#,
        ];
        for script in scripts {
            let first = parse_script(script).unwrap();
            let printed = print_script(&first);
            let second = parse_script(&printed).unwrap_or_else(|e| {
                panic!("reparse failed for {printed:?}: {e}");
            });
            assert_eq!(first, second, "round trip changed AST for {script}");
            assert_eq!(printed, print_script(&second));
        }
    }

    #[test]
    fn operator_precedence_shapes() {
        let q = parse_function_body("SELECT VALUE a.x = 1 AND b.y = 2 OR NOT c.z");
        let q = q.unwrap();
        let SelectHead::Value(e) = &q.select else {
            panic!()
        };
        // ((a.x = 1 AND b.y = 2) OR (NOT c.z))
        let Expr::Binary(BinOp::Or, lhs, rhs) = e.as_ref() else {
            panic!("expected OR at top: {e:?}");
        };
        assert!(matches!(lhs.as_ref(), Expr::Binary(BinOp::And, _, _)));
        assert!(matches!(rhs.as_ref(), Expr::Not(_)));
    }
}
