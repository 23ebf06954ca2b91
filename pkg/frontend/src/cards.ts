import { overlayToSvg } from "./overlay.js";
import type { QueryResult, VerifiedMatch } from "./types.js";

const STATUS_LABELS: Record<string, string> = {
  verified: "verified",
  unverified: "unverified",
  "geometry-failed": "geometry check failed",
};

/**
 * Build one candidate card. Every displayed value is taken verbatim from the
 * match payload; the overlay ellipse list is rendered only when the service
 * marked the match verified, and a geometry failure gets a warning badge.
 */
export function buildCard(match: VerifiedMatch): HTMLElement {
  const card = document.createElement("article");
  card.className = "card";
  card.tabIndex = -1;
  card.dataset.rank = String(match.rank);
  card.dataset.individualId = match["individual-id"];
  card.dataset.imageId = match["image-id"];
  card.dataset.status = match.status;

  const header = document.createElement("header");
  const rank = document.createElement("span");
  rank.className = "rank";
  rank.textContent = `#${match.rank}`;
  const name = document.createElement("span");
  name.className = "individual-id";
  name.textContent = match["individual-id"];
  header.append(rank, name);
  card.appendChild(header);

  const thumb = document.createElement("figure");
  thumb.className = "thumb";
  thumb.dataset.imageRef = match["image-id"];
  const caption = document.createElement("figcaption");
  caption.textContent = match["image-id"];
  thumb.appendChild(caption);
  card.appendChild(thumb);

  const distance = document.createElement("p");
  distance.className = "distance";
  distance.textContent = `distance ${match.distance}`;
  card.appendChild(distance);

  const badge = document.createElement("span");
  badge.className = match.status === "geometry-failed" ? "badge warning" : "badge";
  badge.textContent = STATUS_LABELS[match.status] ?? match.status;
  card.appendChild(badge);

  if (match.status === "verified" && match.overlay) {
    const overlay = document.createElement("div");
    overlay.className = "overlay";
    overlay.innerHTML = overlayToSvg(match.overlay, "db");
    card.appendChild(overlay);
  }

  return card;
}

/** Replace the gallery contents with one card per match, in rank order. */
export function renderCards(gallery: HTMLElement, result: QueryResult): HTMLElement[] {
  const ordered = [...result.matches].sort((a, b) => a.rank - b.rank);
  const cards = ordered.map(buildCard);
  gallery.replaceChildren(...cards);
  return cards;
}
