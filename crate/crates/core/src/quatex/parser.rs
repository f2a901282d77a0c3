use std::collections::{BTreeMap, HashMap};

use super::lexer::{tokenize, Token, TokenKind};
use super::{Call, Definition, EvalDirective, Expr, Parametric, Pos, QueryAst, QueryError};

/// Parses and validates query text.
pub fn parse(source: &str) -> Result<QueryAst, QueryError> {
    let tokens = tokenize(source)?;
    let mut parser = Parser {
        tokens,
        idx: 0,
        call_sites: Vec::new(),
        scope: None,
    };
    let ast = parser.program()?;
    check_calls(&ast, &parser.call_sites)?;
    check_guarded_recursion(&ast)?;
    Ok(ast)
}

struct CallSite {
    name: String,
    arity: usize,
    pos: Pos,
}

struct Parser {
    tokens: Vec<Token>,
    idx: usize,
    call_sites: Vec<CallSite>,
    /// Name and formal parameters of the definition being parsed; `None`
    /// inside directives, where identifiers are free names.
    scope: Option<(String, Vec<String>)>,
}

impl Parser {
    fn peek(&self) -> Option<&TokenKind> {
        self.tokens.get(self.idx).map(|t| &t.kind)
    }

    fn pos(&self) -> Pos {
        match self.tokens.get(self.idx) {
            Some(t) => t.pos,
            None => self
                .tokens
                .last()
                .map(|t| Pos {
                    line: t.pos.line,
                    col: t.pos.col + 1,
                })
                .unwrap_or(Pos { line: 1, col: 1 }),
        }
    }

    fn error(&self, expected: &[&str]) -> QueryError {
        QueryError::Syntax {
            pos: self.pos(),
            found: self
                .peek()
                .map(|k| k.to_string())
                .unwrap_or_else(|| "end of input".into()),
            expected: expected.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn eat(&mut self, kind: &TokenKind) -> bool {
        if self.peek() == Some(kind) {
            self.idx += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, kind: TokenKind) -> Result<(), QueryError> {
        if self.eat(&kind) {
            Ok(())
        } else {
            Err(self.error(&[&kind.to_string()]))
        }
    }

    fn ident(&mut self) -> Result<(String, Pos), QueryError> {
        let pos = self.pos();
        match self.peek() {
            Some(TokenKind::Ident(name)) => {
                let name = name.clone();
                self.idx += 1;
                Ok((name, pos))
            }
            _ => Err(self.error(&["identifier"])),
        }
    }

    fn int(&mut self) -> Result<(i64, Pos), QueryError> {
        let pos = self.pos();
        match self.peek() {
            Some(TokenKind::Int(v)) => {
                let v = *v;
                self.idx += 1;
                Ok((v, pos))
            }
            _ => Err(self.error(&["integer"])),
        }
    }

    fn program(&mut self) -> Result<QueryAst, QueryError> {
        let mut ast = QueryAst::default();
        let mut defined: HashMap<String, Pos> = HashMap::new();
        while self.peek().is_some() {
            if self.peek() == Some(&TokenKind::Eval) {
                ast.directives.push(self.directive()?);
            } else if matches!(self.peek(), Some(TokenKind::Ident(_))) {
                let pos = self.pos();
                let def = self.definition()?;
                if defined.insert(def.name.clone(), pos).is_some() {
                    return Err(QueryError::Duplicate {
                        pos,
                        message: format!("operator `{}` defined twice", def.name),
                    });
                }
                ast.definitions.push(def);
            } else {
                return Err(self.error(&["definition", "`eval`"]));
            }
        }
        Ok(ast)
    }

    fn definition(&mut self) -> Result<Definition, QueryError> {
        let (name, _) = self.ident()?;
        self.expect(TokenKind::LParen)?;
        let mut params: Vec<String> = Vec::new();
        if !self.eat(&TokenKind::RParen) {
            loop {
                let (p, pos) = self.ident()?;
                if params.contains(&p) {
                    return Err(QueryError::Duplicate {
                        pos,
                        message: format!("parameter `{p}` repeated in `{name}`"),
                    });
                }
                params.push(p);
                if self.eat(&TokenKind::RParen) {
                    break;
                }
                self.expect(TokenKind::Comma)?;
            }
        }
        self.expect(TokenKind::Assign)?;
        self.scope = Some((name.clone(), params.clone()));
        let body = self.expr()?;
        self.scope = None;
        self.expect(TokenKind::Semi)?;
        Ok(Definition { name, params, body })
    }

    fn directive(&mut self) -> Result<EvalDirective, QueryError> {
        self.expect(TokenKind::Eval)?;
        let directive = if self.eat(&TokenKind::Parametric) {
            self.expect(TokenKind::LParen)?;
            let target = self.expectation()?;
            self.expect(TokenKind::Comma)?;
            let (var, _) = self.ident()?;
            self.expect(TokenKind::Comma)?;
            let (lo, lo_pos) = self.int()?;
            self.expect(TokenKind::Comma)?;
            let (step, step_pos) = self.int()?;
            self.expect(TokenKind::Comma)?;
            let (hi, _) = self.int()?;
            self.expect(TokenKind::RParen)?;
            if step < 1 {
                return Err(QueryError::InvalidGrid {
                    pos: step_pos,
                    message: format!("step must be at least 1, got {step}"),
                });
            }
            if lo > hi {
                return Err(QueryError::InvalidGrid {
                    pos: lo_pos,
                    message: format!("lower bound {lo} exceeds upper bound {hi}"),
                });
            }
            EvalDirective {
                target,
                parametric: Some(Parametric { var, lo, step, hi }),
            }
        } else if self.peek() == Some(&TokenKind::Expect) {
            EvalDirective {
                target: self.expectation()?,
                parametric: None,
            }
        } else {
            return Err(self.error(&["`parametric`", "`E`"]));
        };
        self.expect(TokenKind::Semi)?;
        Ok(directive)
    }

    fn expectation(&mut self) -> Result<Call, QueryError> {
        self.expect(TokenKind::Expect)?;
        self.expect(TokenKind::LBracket)?;
        let (name, pos) = self.ident()?;
        let call = self.call_rest(name, pos)?;
        self.expect(TokenKind::RBracket)?;
        Ok(call)
    }

    fn call_rest(&mut self, name: String, pos: Pos) -> Result<Call, QueryError> {
        self.expect(TokenKind::LParen)?;
        let mut args = Vec::new();
        if !self.eat(&TokenKind::RParen) {
            loop {
                args.push(self.expr()?);
                if self.eat(&TokenKind::RParen) {
                    break;
                }
                if !self.eat(&TokenKind::Comma) {
                    return Err(self.error(&["`,`", "`)`"]));
                }
            }
        }
        self.call_sites.push(CallSite {
            name: name.clone(),
            arity: args.len(),
            pos,
        });
        Ok(Call { name, args })
    }

    fn expr(&mut self) -> Result<Expr, QueryError> {
        let lhs = self.primary()?;
        if let Some(TokenKind::Cmp(op)) = self.peek() {
            let op = *op;
            self.idx += 1;
            let rhs = self.primary()?;
            return Ok(Expr::Cmp(op, Box::new(lhs), Box::new(rhs)));
        }
        Ok(lhs)
    }

    fn primary(&mut self) -> Result<Expr, QueryError> {
        let pos = self.pos();
        let Some(kind) = self.peek().cloned() else {
            return Err(self.error(&["expression"]));
        };
        match kind {
            TokenKind::Int(v) => {
                self.idx += 1;
                Ok(Expr::Num(v as f64))
            }
            TokenKind::Decimal(v) => {
                self.idx += 1;
                Ok(Expr::Num(v))
            }
            TokenKind::Str(s) => {
                self.idx += 1;
                Ok(Expr::Str(s))
            }
            TokenKind::LParen => {
                self.idx += 1;
                let e = self.expr()?;
                self.expect(TokenKind::RParen)?;
                Ok(e)
            }
            TokenKind::If => {
                self.idx += 1;
                let cond = self.expr()?;
                self.expect(TokenKind::Then)?;
                let then = self.expr()?;
                self.expect(TokenKind::Else)?;
                let otherwise = self.expr()?;
                self.expect(TokenKind::Fi)?;
                Ok(Expr::If {
                    cond: Box::new(cond),
                    then: Box::new(then),
                    otherwise: Box::new(otherwise),
                })
            }
            TokenKind::Hash => {
                self.idx += 1;
                let (name, pos) = self.ident()?;
                Ok(Expr::Next(self.call_rest(name, pos)?))
            }
            TokenKind::State => {
                self.idx += 1;
                self.expect(TokenKind::Dot)?;
                self.rval()
            }
            TokenKind::Rval => self.rval(),
            TokenKind::Ident(name) => {
                self.idx += 1;
                if self.peek() == Some(&TokenKind::LParen) {
                    return Ok(Expr::Call(self.call_rest(name, pos)?));
                }
                if let Some((def, params)) = &self.scope {
                    if !params.contains(&name) {
                        return Err(QueryError::UnboundName {
                            pos,
                            name,
                            definition: def.clone(),
                        });
                    }
                }
                Ok(Expr::Param(name))
            }
            _ => Err(self.error(&["expression"])),
        }
    }

    fn rval(&mut self) -> Result<Expr, QueryError> {
        self.expect(TokenKind::Rval)?;
        self.expect(TokenKind::LParen)?;
        let arg = self.expr()?;
        self.expect(TokenKind::RParen)?;
        Ok(Expr::Rval(Box::new(arg)))
    }
}

fn check_calls(ast: &QueryAst, sites: &[CallSite]) -> Result<(), QueryError> {
    let arity: HashMap<&str, usize> = ast
        .definitions
        .iter()
        .map(|d| (d.name.as_str(), d.params.len()))
        .collect();
    for site in sites {
        match arity.get(site.name.as_str()) {
            None => {
                return Err(QueryError::UnknownOperator {
                    pos: site.pos,
                    name: site.name.clone(),
                })
            }
            Some(&n) if n != site.arity => {
                return Err(QueryError::ArityMismatch {
                    pos: site.pos,
                    name: site.name.clone(),
                    expected: n,
                    found: site.arity,
                })
            }
            Some(_) => {}
        }
    }
    Ok(())
}

/// Calls evaluated in the current state. The call under `#` is deferred,
/// but its arguments are not.
fn unguarded_calls<'a>(expr: &'a Expr, out: &mut Vec<&'a str>) {
    match expr {
        Expr::Num(_) | Expr::Str(_) | Expr::Param(_) => {}
        Expr::Rval(e) => unguarded_calls(e, out),
        Expr::Cmp(_, a, b) => {
            unguarded_calls(a, out);
            unguarded_calls(b, out);
        }
        Expr::If {
            cond,
            then,
            otherwise,
        } => {
            unguarded_calls(cond, out);
            unguarded_calls(then, out);
            unguarded_calls(otherwise, out);
        }
        Expr::Next(call) => call.args.iter().for_each(|a| unguarded_calls(a, out)),
        Expr::Call(call) => {
            out.push(&call.name);
            call.args.iter().for_each(|a| unguarded_calls(a, out));
        }
    }
}

/// Rejects any cycle in the call graph that does not pass through `#`.
fn check_guarded_recursion(ast: &QueryAst) -> Result<(), QueryError> {
    let graph: BTreeMap<&str, Vec<&str>> = ast
        .definitions
        .iter()
        .map(|d| {
            let mut callees = Vec::new();
            unguarded_calls(&d.body, &mut callees);
            (d.name.as_str(), callees)
        })
        .collect();

    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        Open,
        Done,
    }
    fn visit<'a>(
        node: &'a str,
        graph: &BTreeMap<&'a str, Vec<&'a str>>,
        marks: &mut HashMap<&'a str, Mark>,
        path: &mut Vec<&'a str>,
    ) -> Option<Vec<String>> {
        match marks.get(node) {
            Some(Mark::Done) => return None,
            Some(Mark::Open) => {
                let start = path.iter().position(|n| *n == node).unwrap_or(0);
                let mut cycle: Vec<String> = path[start..].iter().map(|s| s.to_string()).collect();
                cycle.push(node.to_string());
                return Some(cycle);
            }
            None => {}
        }
        marks.insert(node, Mark::Open);
        path.push(node);
        for &next in graph.get(node).into_iter().flatten() {
            if let Some(cycle) = visit(next, graph, marks, path) {
                return Some(cycle);
            }
        }
        path.pop();
        marks.insert(node, Mark::Done);
        None
    }

    let mut marks = HashMap::new();
    for &node in graph.keys() {
        let mut path = Vec::new();
        if let Some(cycle) = visit(node, &graph, &mut marks, &mut path) {
            return Err(QueryError::UnguardedRecursion { cycle });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quatex::{CmpOp, OBS_AT_STEP_QUERY};
    use proptest::prelude::*;

    const LISTING: &str = "obsAtStep(x, obs) =
  if (s.rval(\"steps\") == x) then s.rval(obs)
  else # obsAtStep(x, obs) fi;

eval parametric(E[obsAtStep(x, obs)], x, 101, 10, 600);
";

    #[test]
    fn parses_transient_pattern() {
        let ast = parse(LISTING).unwrap();
        assert_eq!(ast.definitions.len(), 1);
        let def = &ast.definitions[0];
        assert_eq!(def.name, "obsAtStep");
        assert_eq!(def.params, ["x", "obs"]);
        let steps = Expr::Rval(Box::new(Expr::Str("steps".into())));
        assert_eq!(
            def.body,
            Expr::If {
                cond: Box::new(Expr::Cmp(
                    CmpOp::Eq,
                    Box::new(steps),
                    Box::new(Expr::Param("x".into()))
                )),
                then: Box::new(Expr::Rval(Box::new(Expr::Param("obs".into())))),
                otherwise: Box::new(Expr::Next(Call {
                    name: "obsAtStep".into(),
                    args: vec![Expr::Param("x".into()), Expr::Param("obs".into())],
                })),
            }
        );
        assert_eq!(ast.directives.len(), 1);
        assert_eq!(
            ast.directives[0].parametric,
            Some(Parametric {
                var: "x".into(),
                lo: 101,
                step: 10,
                hi: 600
            })
        );
        assert!(OBS_AT_STEP_QUERY.starts_with("obsAtStep(x, obs) ="));
    }

    #[test]
    fn receiverless_rval_alias() {
        let a = parse("f(o) = rval(o); eval E[f(o)];").unwrap();
        let b = parse("f(o) = s.rval(o); eval E[f(o)];").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn constant_query() {
        let ast = parse("eval E[f()]; f() = 1;").unwrap();
        assert_eq!(ast.definitions[0].body, Expr::Num(1.0));
        assert_eq!(ast.directives[0].parametric, None);
    }

    #[test]
    fn rejects_unguarded_recursion() {
        assert_eq!(
            parse("f() = f();"),
            Err(QueryError::UnguardedRecursion {
                cycle: vec!["f".into(), "f".into()]
            })
        );
        assert!(matches!(
            parse("f() = g(); g() = if 1 == 1 then 1 else f() fi;"),
            Err(QueryError::UnguardedRecursion { .. })
        ));
        // Arguments of a deferred call are evaluated now.
        assert!(matches!(
            parse("f(a) = # f(f(a));"),
            Err(QueryError::UnguardedRecursion { .. })
        ));
        assert!(parse("f() = g(); g() = # f();").is_ok());
    }

    #[test]
    fn rejects_unknown_operator_and_arity() {
        assert!(matches!(
            parse("eval E[g()];"),
            Err(QueryError::UnknownOperator { name, .. }) if name == "g"
        ));
        assert!(matches!(
            parse("f(a) = a; eval E[f(1, 2)];"),
            Err(QueryError::ArityMismatch {
                expected: 1,
                found: 2,
                ..
            })
        ));
    }

    #[test]
    fn rejects_free_names_in_bodies() {
        assert!(matches!(
            parse("f(a) = b;"),
            Err(QueryError::UnboundName { name, .. }) if name == "b"
        ));
    }

    #[test]
    fn rejects_duplicates() {
        assert!(matches!(
            parse("f() = 1; f() = 2;"),
            Err(QueryError::Duplicate { .. })
        ));
        assert!(matches!(
            parse("f(a, a) = 1;"),
            Err(QueryError::Duplicate { .. })
        ));
    }

    #[test]
    fn rejects_bad_grids() {
        assert!(matches!(
            parse("f(x) = x; eval parametric(E[f(x)], x, 1, 0, 3);"),
            Err(QueryError::InvalidGrid { .. })
        ));
        assert!(matches!(
            parse("f(x) = x; eval parametric(E[f(x)], x, 5, 1, 3);"),
            Err(QueryError::InvalidGrid { .. })
        ));
    }

    #[test]
    fn syntax_error_reports_position_and_expectation() {
        match parse("f(x) =\n  if x then 1 else 2;") {
            Err(QueryError::Syntax {
                pos,
                expected,
                found,
                ..
            }) => {
                assert_eq!(pos, Pos { line: 2, col: 21 });
                assert_eq!(expected, ["`fi`"]);
                assert_eq!(found, "`;`");
            }
            other => panic!("{other:?}"),
        }
        match parse("f() = 1") {
            Err(QueryError::Syntax { found, .. }) => assert_eq!(found, "end of input"),
            other => panic!("{other:?}"),
        }
        assert!(parse("f() = 1 == 2 == 3;").is_err());
    }

    #[test]
    fn printed_listing_reparses() {
        let ast = parse(LISTING).unwrap();
        assert_eq!(parse(&ast.to_string()).unwrap(), ast);
    }

    // Generated ASTs for the print/parse round trip. Bodies only reference
    // formals, calls target earlier definitions (acyclic) or go through `#`.
    fn arb_expr(
        params: Vec<String>,
        callees: Vec<(String, usize)>,
        depth: u32,
    ) -> BoxedStrategy<Expr> {
        let mut leaves: Vec<BoxedStrategy<Expr>> = vec![
            (0u32..1000).prop_map(|v| Expr::Num(v as f64 / 8.0)).boxed(),
            (-50i32..50).prop_map(|v| Expr::Num(v as f64)).boxed(),
            "[a-zA-Z_ \"\\\\]{0,8}".prop_map(Expr::Str).boxed(),
        ];
        if !params.is_empty() {
            leaves.push(
                proptest::sample::select(params.clone())
                    .prop_map(Expr::Param)
                    .boxed(),
            );
        }
        let leaf = proptest::strategy::Union::new(leaves).boxed();
        if depth == 0 {
            return leaf;
        }
        let sub = arb_expr(params.clone(), callees.clone(), depth - 1);
        let ops = proptest::sample::select(vec![
            CmpOp::Eq,
            CmpOp::Ne,
            CmpOp::Lt,
            CmpOp::Le,
            CmpOp::Gt,
            CmpOp::Ge,
        ]);
        let mut options: Vec<BoxedStrategy<Expr>> = vec![
            leaf,
            sub.clone().prop_map(|e| Expr::Rval(Box::new(e))).boxed(),
            (ops, sub.clone(), sub.clone())
                .prop_map(|(op, a, b)| Expr::Cmp(op, Box::new(a), Box::new(b)))
                .boxed(),
            (sub.clone(), sub.clone(), sub.clone())
                .prop_map(|(c, t, o)| Expr::If {
                    cond: Box::new(c),
                    then: Box::new(t),
                    otherwise: Box::new(o),
                })
                .boxed(),
        ];
        if !callees.is_empty() {
            let sub2 = sub.clone();
            let calls = proptest::sample::select(callees).prop_flat_map(move |(name, arity)| {
                proptest::collection::vec(sub2.clone(), arity).prop_map(move |args| Call {
                    name: name.clone(),
                    args,
                })
            });
            options.push(calls.clone().prop_map(Expr::Call).boxed());
            options.push(calls.prop_map(Expr::Next).boxed());
        }
        proptest::strategy::Union::new(options).boxed()
    }

    fn arb_ast() -> impl Strategy<Value = QueryAst> {
        (1usize..4, proptest::collection::vec(0usize..3, 4)).prop_flat_map(|(n_defs, arities)| {
            let mut defs: Vec<BoxedStrategy<Definition>> = Vec::new();
            for i in 0..n_defs {
                let name = format!("op{i}");
                let params: Vec<String> = (0..arities[i]).map(|k| format!("p{k}")).collect();
                // Earlier definitions only: calls cannot form unguarded cycles.
                let callees: Vec<(String, usize)> =
                    (0..i).map(|j| (format!("op{j}"), arities[j])).collect();
                let params2 = params.clone();
                defs.push(
                    arb_expr(params, callees, 2)
                        .prop_map(move |body| Definition {
                            name: name.clone(),
                            params: params2.clone(),
                            body,
                        })
                        .boxed(),
                );
            }
            let last = n_defs - 1;
            let target_arity = arities[last];
            (defs, 0i64..50, 1i64..20, 0i64..100, any::<bool>()).prop_map(
                move |(definitions, lo, step, span, parametric)| {
                    let args = (0..target_arity)
                        .map(|k| Expr::Param(format!("v{k}")))
                        .collect();
                    QueryAst {
                        definitions,
                        directives: vec![EvalDirective {
                            target: Call {
                                name: format!("op{last}"),
                                args,
                            },
                            parametric: parametric.then(|| Parametric {
                                var: "v0".into(),
                                lo,
                                step,
                                hi: lo + span,
                            }),
                        }],
                    }
                },
            )
        })
    }

    proptest! {
        #[test]
        fn print_parse_round_trip(ast in arb_ast()) {
            let text = ast.to_string();
            let reparsed = parse(&text);
            prop_assert_eq!(reparsed, Ok(ast), "text:\n{}", text);
        }

        #[test]
        fn grid_cardinality(lo in 1i64..1000, step in 1i64..100, span in 0i64..2000) {
            let p = Parametric { var: "x".into(), lo, step, hi: lo + span };
            prop_assert_eq!(p.values().count(), (span / step + 1) as usize);
            prop_assert_eq!(p.len(), (span / step + 1) as usize);
        }
    }
}
