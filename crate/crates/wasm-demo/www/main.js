// Build with: wasm-pack build crates/wasm-demo --target web --out-dir www/pkg
import init, { sampler, compare, tokenize } from "./pkg/mrwkv_wasm_demo.js";

const $ = (id) => document.getElementById(id);
const numbers = (s) => s.split(",").map((x) => x.trim()).filter((x) => x !== "").map(Number);

function drawDistribution() {
  const input = {
    logits: numbers($("logits").value),
    history: numbers($("history").value),
    temperature: Number($("temperature").value),
    repetition_penalty: Number($("penalty").value),
    top_k: Number($("topk").value),
    top_p: Number($("topp").value),
  };
  let out;
  try {
    out = JSON.parse(sampler(JSON.stringify(input)));
  } catch (e) {
    $("kept").textContent = String(e);
    return;
  }
  const max = Math.max(...out.softmax, ...out.filtered);
  $("dist").replaceChildren(
    ...out.filtered.map((p, i) => {
      const d = document.createElement("div");
      d.style.height = `${(100 * Math.max(p, out.softmax[i] * 0.15)) / max}%`;
      d.className = p > 0 ? "" : "off";
      d.title = `token ${i}: ${p.toFixed(4)} (softmax ${out.softmax[i].toFixed(4)})`;
      return d;
    }),
  );
  $("kept").textContent = `${out.kept} of ${out.filtered.length} tokens keep probability mass`;
}

function groove(el, cells) {
  el.replaceChildren(
    ...cells.map((on) => {
      const s = document.createElement("span");
      if (on) s.className = "on";
      return s;
    }),
  );
}

function runCompare() {
  try {
    const input = { original: JSON.parse($("original").value), infill: JSON.parse($("infill").value) };
    const out = JSON.parse(compare(JSON.stringify(input)));
    groove($("groove-o"), out.groove_original);
    groove($("groove-i"), out.groove_infill);
    const f = (x) => (x === null ? "n/a" : x.toFixed(4));
    $("scores").textContent = `CP ${f(out.cp)}   GS ${f(out.gs)}   PCHE ${f(out.pche)}   F1 ${f(out.f1)}`;
  } catch (e) {
    $("scores").textContent = String(e);
  }
}

function runTokenize() {
  try {
    const out = JSON.parse(tokenize($("original").value));
    $("tokens").textContent = out.tokens.join(" ") + "\n\ncontrols: " + JSON.stringify(out.controls);
  } catch (e) {
    $("tokens").textContent = String(e);
  }
}

await init();
for (const id of ["logits", "temperature", "penalty", "topk", "topp", "history"]) {
  $(id).addEventListener("input", drawDistribution);
}
$("compare").addEventListener("click", runCompare);
$("tokenize").addEventListener("click", runTokenize);
drawDistribution();
runCompare();
