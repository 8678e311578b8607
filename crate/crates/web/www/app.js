import init, { Demo } from "./pkg/opq_browser.js";

const ARROWS = ["↑", "↓", "←", "→", "·"];
const SIZE = 5;
let focus = [2, 2];

const $ = (id) => document.getElementById(id);

function color(t) {
  const l = 95 - 55 * t;
  return `hsl(210, 70%, ${l}%)`;
}

function render() {
  const demo = new Demo(SIZE, +$("slip").value, +$("gamma").value, 0.1);
  const view = $("view").value;
  const sigma = +$("sigma").value;
  const [r, c] = focus;
  let values, arrows = null;
  try {
    if (view === "visit") {
      values = demo.visitation(r * SIZE + c, 4);
    } else {
      values = demo.values(r, c, sigma, view === "qstar");
      if (view === "qstar") arrows = demo.greedy(r, c, sigma);
    }
  } catch (e) {
    $("info").textContent = e;
    return;
  }
  const lo = Math.min(...values), hi = Math.max(...values);
  const grid = $("grid");
  grid.style.gridTemplateColumns = `repeat(${SIZE}, 56px)`;
  grid.innerHTML = "";
  values.forEach((v, s) => {
    const el = document.createElement("div");
    el.className = "cell";
    el.style.background = color(hi > lo ? (v - lo) / (hi - lo) : 0);
    el.title = v.toFixed(4);
    el.textContent = arrows ? ARROWS[arrows[s]] : "";
    if (s === r * SIZE + c) el.style.outline = "2px solid #c33";
    el.onclick = () => { focus = [Math.floor(s / SIZE), s % SIZE]; render(); };
    grid.appendChild(el);
  });
  $("info").textContent = `min ${lo.toFixed(3)}  max ${hi.toFixed(3)}`;
  demo.free();
}

await init();
for (const id of ["view", "gamma", "slip", "sigma"]) $(id).onchange = render;
render();
