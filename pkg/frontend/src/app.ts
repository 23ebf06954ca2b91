import { ApiClient, ApiError } from "./api.js";
import type { FetchLike } from "./api.js";
import { renderCards } from "./cards.js";
import type { QueryResult } from "./types.js";

/** Upload types the service understands; anything else is rejected locally. */
export const ACCEPTED_EXTENSIONS = [".png", ".pgm", ".nrpd", ".nrpf"] as const;

export function acceptsFile(name: string): boolean {
  const lower = name.toLowerCase();
  return ACCEPTED_EXTENSIONS.some((ext) => lower.endsWith(ext));
}

export interface ReviewAppOptions {
  root: HTMLElement;
  baseUrl?: string;
  fetchImpl?: FetchLike;
}

/**
 * Keyboard-driven review loop over retrieval candidates.
 *
 * One query at a time: the gallery shows the returned matches in rank order,
 * a cursor walks the cards, and each card can be confirmed (one POST /confirm
 * per query) or rejected locally. Rejecting every candidate opens the
 * register-new panel, which confirms the query image against a freshly
 * created individual instead.
 */
export class ReviewApp {
  readonly api: ApiClient;
  readonly root: HTMLElement;

  result: QueryResult | null = null;
  cards: HTMLElement[] = [];
  cursor = 0;
  confirmed = false;
  /** Last action kicked off by a keyboard or click handler, for awaiting. */
  pending: Promise<void> = Promise.resolve();

  private readonly rejected = new Set<number>();
  private fileInput!: HTMLInputElement;
  private gallery!: HTMLElement;
  private message!: HTMLElement;
  private countLabel!: HTMLElement;
  private individualList!: HTMLUListElement;
  private registerPanel!: HTMLElement;
  private registerName!: HTMLInputElement;

  constructor(options: ReviewAppOptions) {
    this.root = options.root;
    this.api = new ApiClient(options.baseUrl ?? "", options.fetchImpl);
    this.buildSkeleton();
    this.bindEvents();
  }

  /** Load the initial individual roster; safe to call again to refresh. */
  async start(): Promise<void> {
    await this.refreshIndividuals();
  }

  async submitQuery(file: File | null): Promise<void> {
    if (!file) {
      this.setMessage("choose a pattern, descriptor, or embedding file first", true);
      return;
    }
    if (!acceptsFile(file.name)) {
      this.setMessage(
        `unsupported file type: ${file.name} (expected ${ACCEPTED_EXTENSIONS.join(", ")})`,
        true,
      );
      return;
    }
    this.setMessage(`querying with ${file.name}…`, false);
    let result: QueryResult;
    try {
      result = await this.api.query(file);
    } catch (exc) {
      this.showError(exc);
      return;
    }
    this.result = result;
    this.confirmed = false;
    this.rejected.clear();
    this.cards = renderCards(this.gallery, result);
    this.registerPanel.hidden = true;
    if (this.cards.length === 0) {
      this.setMessage("no candidates returned — register as a new individual?", false);
      this.registerPanel.hidden = false;
      return;
    }
    this.setCursor(0);
    this.setMessage(
      `${this.cards.length} candidates for ${result["query-image-id"]}`,
      false,
    );
  }

  nextCard(): void {
    if (this.cards.length) this.setCursor(Math.min(this.cursor + 1, this.cards.length - 1));
  }

  prevCard(): void {
    if (this.cards.length) this.setCursor(Math.max(this.cursor - 1, 0));
  }

  /** Confirm the card under the cursor; at most one confirm per query. */
  async confirmActive(): Promise<void> {
    const card = this.cards[this.cursor];
    if (!this.result || !card) return;
    if (this.confirmed) {
      this.setMessage("this query is already confirmed", true);
      return;
    }
    const individualId = card.dataset.individualId ?? "";
    try {
      const response = await this.api.confirm({
        "query-image-id": this.result["query-image-id"],
        "individual-id": individualId,
      });
      this.confirmed = true;
      card.classList.add("confirmed");
      this.setMessage(`confirmed as ${response["individual-id"]}`, false);
      await this.refreshIndividuals();
    } catch (exc) {
      this.showError(exc);
    }
  }

  /** Reject the active card locally and advance; no request is sent. */
  rejectActive(): void {
    const card = this.cards[this.cursor];
    if (!card) return;
    this.rejected.add(this.cursor);
    card.classList.add("rejected");
    if (this.rejected.size === this.cards.length) {
      this.registerPanel.hidden = false;
      this.registerName.focus();
      this.setMessage("all candidates rejected — register as a new individual?", false);
      return;
    }
    for (let step = 1; step <= this.cards.length; step += 1) {
      const candidate = (this.cursor + step) % this.cards.length;
      if (!this.rejected.has(candidate)) {
        this.setCursor(candidate);
        return;
      }
    }
  }

  /** Create a new individual (optionally named) and confirm the query into it. */
  async registerNew(name?: string): Promise<void> {
    if (!this.result) {
      this.setMessage("run a query before registering", true);
      return;
    }
    if (this.confirmed) {
      this.setMessage("this query is already confirmed", true);
      return;
    }
    const payload: { "query-image-id": string; new: true; "individual-id"?: string } = {
      "query-image-id": this.result["query-image-id"],
      new: true,
    };
    const trimmed = name?.trim();
    if (trimmed) payload["individual-id"] = trimmed;
    try {
      const response = await this.api.confirm(payload);
      this.confirmed = true;
      this.registerPanel.hidden = true;
      this.setMessage(`registered new individual ${response["individual-id"]}`, false);
      await this.refreshIndividuals();
    } catch (exc) {
      this.showError(exc);
    }
  }

  async refreshIndividuals(): Promise<void> {
    try {
      const response = await this.api.individuals();
      this.countLabel.textContent = `${response.count} individuals`;
      this.individualList.replaceChildren(
        ...response.individuals.map((id) => {
          const item = document.createElement("li");
          item.textContent = id;
          return item;
        }),
      );
    } catch (exc) {
      this.showError(exc);
    }
  }

  private setCursor(index: number): void {
    this.cursor = index;
    this.cards.forEach((card, i) => card.classList.toggle("active", i === index));
    this.cards[index]?.focus();
  }

  private setMessage(text: string, isError: boolean): void {
    this.message.textContent = text;
    this.message.classList.toggle("error", isError);
  }

  private showError(exc: unknown): void {
    if (exc instanceof ApiError) {
      this.setMessage(exc.display, true);
    } else {
      this.setMessage(String(exc), true);
    }
  }

  private buildSkeleton(): void {
    this.root.classList.add("review-app");

    const topbar = document.createElement("header");
    topbar.className = "topbar";
    const title = document.createElement("h1");
    title.textContent = "pattern review";
    const form = document.createElement("form");
    form.className = "query-form";
    this.fileInput = document.createElement("input");
    this.fileInput.type = "file";
    this.fileInput.className = "file-input";
    this.fileInput.accept = ACCEPTED_EXTENSIONS.join(",");
    const submit = document.createElement("button");
    submit.type = "submit";
    submit.className = "submit-btn";
    submit.textContent = "query";
    form.append(this.fileInput, submit);
    this.countLabel = document.createElement("span");
    this.countLabel.className = "individual-count";
    topbar.append(title, form, this.countLabel);

    this.message = document.createElement("p");
    this.message.className = "message";
    this.message.setAttribute("role", "status");

    const main = document.createElement("main");
    this.gallery = document.createElement("section");
    this.gallery.className = "gallery";

    this.registerPanel = document.createElement("aside");
    this.registerPanel.className = "register";
    this.registerPanel.hidden = true;
    const prompt = document.createElement("p");
    prompt.className = "register-prompt";
    prompt.textContent = "no match confirmed — register as a new individual";
    this.registerName = document.createElement("input");
    this.registerName.type = "text";
    this.registerName.className = "register-name";
    this.registerName.placeholder = "name (optional)";
    const registerButton = document.createElement("button");
    registerButton.type = "button";
    registerButton.className = "register-btn";
    registerButton.textContent = "register new";
    this.registerPanel.append(prompt, this.registerName, registerButton);
    main.append(this.gallery, this.registerPanel);

    this.individualList = document.createElement("ul");
    this.individualList.className = "individuals";

    const help = document.createElement("footer");
    help.className = "help";
    help.textContent = "keys: j/→ next · k/← prev · c confirm · x reject · n register new";

    this.root.replaceChildren(topbar, this.message, main, this.individualList, help);

    form.addEventListener("submit", (event) => {
      event.preventDefault();
      this.pending = this.submitQuery(this.fileInput.files?.[0] ?? null);
    });
    registerButton.addEventListener("click", () => {
      this.pending = this.registerNew(this.registerName.value);
    });
  }

  private bindEvents(): void {
    this.root.addEventListener("keydown", (event) => {
      if (event.target === this.registerName || event.target === this.fileInput) return;
      switch (event.key) {
        case "j":
        case "ArrowRight":
          this.nextCard();
          break;
        case "k":
        case "ArrowLeft":
          this.prevCard();
          break;
        case "c":
          this.pending = this.confirmActive();
          break;
        case "x":
          this.rejectActive();
          break;
        case "n":
          this.registerPanel.hidden = false;
          this.registerName.focus();
          break;
        default:
          return;
      }
      event.preventDefault();
    });
    this.gallery.addEventListener("click", (event) => {
      const card = (event.target as HTMLElement).closest<HTMLElement>(".card");
      if (!card) return;
      const index = this.cards.indexOf(card);
      if (index >= 0) this.setCursor(index);
    });
  }
}

export function mountReviewApp(options: ReviewAppOptions): ReviewApp {
  const app = new ReviewApp(options);
  app.pending = app.start();
  return app;
}
