import { mountReviewApp } from "./app.js";

// Browser entry point: mount against the same origin that served the page.
document.addEventListener("DOMContentLoaded", () => {
  const root = document.getElementById("app");
  if (root) mountReviewApp({ root });
});
